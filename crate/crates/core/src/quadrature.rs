//! Adaptive Gauss-Kronrod (7/15) quadrature on finite intervals, plus a
//! nested rule for rectangles. Used for KL oracles at n <= 2.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 40;

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

fn adapt<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (val, err) = gk15(f, a, b);
    if err <= tol || depth >= MAX_DEPTH || (b - a).abs() < 1e-12 * (1.0 + a.abs()) {
        return val;
    }
    let mid = 0.5 * (a + b);
    adapt(f, a, mid, 0.5 * tol, depth + 1) + adapt(f, mid, b, 0.5 * tol, depth + 1)
}

/// `int_a^b f`, to roughly `tol` absolute accuracy.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    // Start from a few panels so narrow features are not missed entirely.
    const PANELS: usize = 8;
    let w = (b - a) / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let lo = a + w * i as f64;
            let hi = if i + 1 == PANELS { b } else { lo + w };
            adapt(&mut f, lo, hi, tol / PANELS as f64, 0)
        })
        .sum()
}

/// `int int f(x, y) dy dx` over a rectangle, by nesting the 1-d rule.
pub fn integrate_2d<F: Fn(f64, f64) -> f64>(f: F, x_range: (f64, f64), y_range: (f64, f64), tol: f64) -> f64 {
    let width = x_range.1 - x_range.0;
    let inner_tol = 0.1 * tol / width.max(1.0);
    integrate(
        |x| integrate(|y| f(x, y), y_range.0, y_range.1, inner_tol),
        x_range.0,
        x_range.1,
        tol,
    )
}
