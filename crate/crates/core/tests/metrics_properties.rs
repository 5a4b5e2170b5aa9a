use arena_pref::ingest::{Label, LabelVector};
use arena_pref::metrics::{accuracy, argmax, check_simplex, evaluate, log_loss, ProbabilityTriple};
use arena_pref::numeric::cross_entropy_row;
use proptest::prelude::*;

fn triple() -> impl Strategy<Value = ProbabilityTriple> {
    (0.001f64..1.0, 0.001f64..1.0, 0.001f64..1.0).prop_map(|(a, b, c)| {
        let s = a + b + c;
        ProbabilityTriple([a / s, b / s, c / s])
    })
}

fn label() -> impl Strategy<Value = LabelVector> {
    (0usize..3).prop_map(|i| Label::from_index(i).unwrap().encode())
}

fn dataset(max: usize) -> impl Strategy<Value = (Vec<ProbabilityTriple>, Vec<LabelVector>)> {
    prop::collection::vec((triple(), label()), 1..max).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn permutation_invariance((preds, labels) in dataset(60), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let p2: Vec<_> = order.iter().map(|&i| preds[i]).collect();
        let l2: Vec<_> = order.iter().map(|&i| labels[i]).collect();
        let a = evaluate(&preds, &labels).unwrap();
        let b = evaluate(&p2, &l2).unwrap();
        prop_assert!((a.log_loss - b.log_loss).abs() < 1e-12);
        prop_assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn concatenation_is_size_weighted((p1, l1) in dataset(40), (p2, l2) in dataset(40)) {
        let (n1, n2) = (p1.len() as f64, p2.len() as f64);
        let all_p: Vec<_> = p1.iter().chain(&p2).copied().collect();
        let all_l: Vec<_> = l1.iter().chain(&l2).copied().collect();
        let whole = log_loss(&all_p, &all_l).unwrap();
        let parts = (n1 * log_loss(&p1, &l1).unwrap() + n2 * log_loss(&p2, &l2).unwrap()) / (n1 + n2);
        prop_assert!((whole - parts).abs() < 1e-12);
        let acc = (n1 * accuracy(&p1, &l1).unwrap() + n2 * accuracy(&p2, &l2).unwrap()) / (n1 + n2);
        prop_assert!((accuracy(&all_p, &all_l).unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn bounds((preds, labels) in dataset(40)) {
        let r = evaluate(&preds, &labels).unwrap();
        prop_assert!(r.log_loss > 0.0);
        prop_assert!((0.0..=1.0).contains(&r.accuracy));
        prop_assert_eq!(r.n, preds.len());
    }

    #[test]
    fn rescaling_keeps_argmax_but_not_loss(t in triple(), y in label(), c in 1.5f64..10.0) {
        let scaled = [t.0[0] * c, t.0[1] * c, t.0[2] * c];
        prop_assert_eq!(argmax(&scaled), argmax(&t.0));
        prop_assert!(check_simplex(&ProbabilityTriple(scaled), 1e-9).is_err());
        let diff = cross_entropy_row(&y.0, &t.0) - cross_entropy_row(&y.0, &scaled);
        prop_assert!((diff - c.ln()).abs() < 1e-9);
    }
}

#[test]
fn zero_loss_only_with_certainty_on_the_truth() {
    let labels = [Label::A.encode(), Label::Tie.encode()];
    let sure = [
        ProbabilityTriple::new(1.0, 0.0, 0.0),
        ProbabilityTriple::new(0.0, 0.0, 1.0),
    ];
    assert_eq!(log_loss(&sure, &labels).unwrap(), 0.0);
    let unsure = [
        ProbabilityTriple::new(1.0, 0.0, 0.0),
        ProbabilityTriple::new(0.0, 0.01, 0.99),
    ];
    assert!(log_loss(&unsure, &labels).unwrap() > 0.0);
}

#[test]
fn report_serializes_with_three_keys() {
    let r = evaluate(&[ProbabilityTriple::UNIFORM], &[Label::B.encode()]).unwrap();
    let v: serde_json::Value = serde_json::to_value(r).unwrap();
    let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["accuracy", "log_loss", "n"]);
    assert!((r.log_loss - 3f64.ln()).abs() < 1e-12);
}
