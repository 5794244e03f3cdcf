use pacmix::divergence::{kl_gaussian_1d, kl_gaussian_bound};
use pacmix::io::{read_samples_csv, write_samples_csv};
use pacmix::mlselect::select_ml;
use pacmix::sampling::{draw_mixture, PairMatrix};
use pacmix::{Bounds, Component, Density, MixtureModel, SampleSet};
use proptest::prelude::*;

fn mixture() -> impl Strategy<Value = MixtureModel> {
    (1usize..4, 1usize..4).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(0.05f64..1.0, k),
            prop::collection::vec(prop::collection::vec(-1.0f64..=1.0, n), k),
            prop::collection::vec(prop::collection::vec(0.5f64..=2.0, n), k),
        )
            .prop_map(|(w, m, v)| {
                let total: f64 = w.iter().sum();
                let b = Bounds::new(1.0, 0.5, 2.0).unwrap();
                let comps = m
                    .into_iter()
                    .zip(v)
                    .map(|(m, v)| Component::new(m, v).unwrap())
                    .collect();
                MixtureModel::new(b, w.iter().map(|x| x / total).collect(), comps).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn model_json_round_trip(m in mixture()) {
        let s = serde_json::to_string(&m).unwrap();
        let back: MixtureModel = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(&back, &m);
        let x = vec![0.3; m.n()];
        prop_assert_eq!(back.log_density(&x).to_bits(), m.log_density(&x).to_bits());
    }

    #[test]
    fn samples_csv_round_trip(m in mixture(), seed in any::<u64>()) {
        let s = draw_mixture(&m, 50, seed).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&s, &mut buf).unwrap();
        let back = read_samples_csv(&buf[..], seed, "round trip").unwrap();
        prop_assert_eq!(back.as_slice(), s.as_slice());
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(mp in -2.0f64..2.0, mq in -2.0f64..2.0, vp in 0.1f64..5.0, vq in 0.1f64..5.0) {
        let kl = kl_gaussian_1d((mp, vp), (mq, vq)).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(kl_gaussian_1d((mp, vp), (mp, vp)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_bound_dominates(s2min in 0.05f64..2.0, fv in 0.0f64..0.999, em in 0.0f64..2.0,
                          up in 0.0f64..3.0, tv in -1.0f64..1.0, tm in -1.0f64..1.0, mp in -2.0f64..2.0) {
        let ev = fv * s2min;
        let vp = s2min * (1.0 + up);
        let vq = vp + tv * ev;
        let mq = mp + tm * em;
        let exact = kl_gaussian_1d((mp, vp), (mq, vq)).unwrap();
        prop_assert!(kl_gaussian_bound(em, ev, s2min).unwrap() >= exact);
    }

    #[test]
    fn pair_matrix_json_round_trip(vals in prop::collection::vec(-10.0f64..10.0, 6)) {
        let mut it = vals.into_iter();
        let pm = PairMatrix::from_fn(4, |_, _| it.next().unwrap());
        let s = serde_json::to_string(&pm).unwrap();
        let back: PairMatrix<f64> = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(back, pm);
    }

    #[test]
    fn ml_picks_a_maximizer(models in prop::collection::vec(mixture(), 1..6), seed in any::<u64>()) {
        let n = models[0].n();
        let models: Vec<MixtureModel> = models.into_iter().filter(|m| m.n() == n).collect();
        let s = draw_mixture(&models[0], 100, seed).unwrap();
        let sel = select_ml(&models, &s).unwrap();
        let best = sel.log_likelihoods.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(sel.log_likelihoods[sel.index], best);
        prop_assert!(sel.log_likelihoods[..sel.index].iter().all(|&v| v < best));
    }
}

#[test]
fn ragged_sample_data_is_rejected() {
    assert!(SampleSet::new(vec![1.0, 2.0, 3.0], 2, 0, "ragged").is_err());
}
