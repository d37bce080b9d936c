use std::collections::BTreeMap;

use caibc::branches::Branch;
use caibc::losses::{class_probs, id_loss, mutual_learning_loss, triplet_loss, ClassifierHead, ProbDist};
use caibc::tensor::Tensor;
use proptest::prelude::*;

fn dist(n: usize) -> impl Strategy<Value = ProbDist> {
    prop::collection::vec(1e-4f64..1.0, n).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        ProbDist(raw.into_iter().map(|v| v / s).collect())
    })
}

fn identity_head(m: usize, scale: f64) -> ClassifierHead {
    let mut w = Tensor::zeros(&[m, m]);
    for i in 0..m {
        w.data_mut()[i * m + i] = 1.0;
    }
    ClassifierHead::new(w, scale).unwrap()
}

proptest! {
    #[test]
    fn mutual_learning_is_non_negative(ps in prop::collection::vec((dist(4), dist(4)), 3)) {
        let mut m = BTreeMap::new();
        for (b, (v, t)) in [Branch::Rgb, Branch::Grs, Branch::Clr].into_iter().zip(ps) {
            m.insert(b, (vec![v], vec![t]));
        }
        for (_, l) in mutual_learning_loss(&m).unwrap() {
            prop_assert!(l >= 0.0);
        }
    }

    #[test]
    fn class_probs_sum_to_one(f in prop::collection::vec(-3.0f64..3.0, 5), scale in 0.5f64..20.0) {
        let p = class_probs(&f, &identity_head(5, scale)).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.probs().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn id_loss_falls_as_true_class_strengthens(
        f in prop::collection::vec(-2.0f64..2.0, 4),
        y in 0usize..4,
        step in 0.01f64..2.0,
    ) {
        let head = identity_head(4, 4.0);
        let mut g = f.clone();
        g[y] += step;
        let before = id_loss(&[f], &[y], &head).unwrap();
        let after = id_loss(&[g], &[y], &head).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn triplet_is_monotone(
        pos in -1.0f64..1.0,
        neg in -1.0f64..1.0,
        d in 0.0f64..0.5,
        margin in 0.0f64..0.5,
    ) {
        let l = triplet_loss(&[pos], &[neg], margin).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(triplet_loss(&[pos + d], &[neg], margin).unwrap() <= l);
        prop_assert!(triplet_loss(&[pos], &[neg + d], margin).unwrap() >= l);
        prop_assert!(triplet_loss(&[pos], &[neg], margin + d).unwrap() >= l);
    }
}
