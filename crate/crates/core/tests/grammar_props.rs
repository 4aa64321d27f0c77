use circomp::grammar::{eval_expr, gen_mixed, parse_source, render, Expr, GenConfig, OpKind};
use proptest::prelude::*;

fn symbols() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec((0u8..26, 1u32..4), 1..8)
        .prop_map(|v| v.into_iter().map(|(c, d)| format!("{}{}", (b'A' + c) as char, d)).collect())
}

fn expr() -> impl Strategy<Value = Expr> {
    let leaf = symbols().prop_map(Expr::Leaf);
    leaf.prop_recursive(3, 16, 2, |inner| {
        (0usize..10, inner.clone(), inner).prop_map(|(k, a, b)| {
            let op = OpKind::ALL[k];
            let args = if op.arity() == 1 { vec![a] } else { vec![a, b] };
            Expr::Apply(op, args)
        })
    })
}

fn un(op: OpKind, x: &[String]) -> Vec<String> {
    eval_expr(&Expr::apply(op, vec![Expr::Leaf(x.to_vec())]))
}

proptest! {
    #[test]
    fn render_then_parse_is_identity(e in expr()) {
        prop_assert_eq!(parse_source(&render(&e)).unwrap(), e);
    }

    #[test]
    fn unary_identities(x in symbols()) {
        let rr = eval_expr(&Expr::apply(
            OpKind::Reverse,
            vec![Expr::apply(OpKind::Reverse, vec![Expr::Leaf(x.clone())])],
        ));
        prop_assert_eq!(&rr, &x);
        let ss = eval_expr(&Expr::apply(
            OpKind::Swap,
            vec![Expr::apply(OpKind::Swap, vec![Expr::Leaf(x.clone())])],
        ));
        prop_assert_eq!(&ss, &x);
        let copy = un(OpKind::Copy, &x);
        prop_assert_eq!(un(OpKind::Repeat, &x), [copy.clone(), copy].concat());
        let mut echoed = x.clone();
        echoed.push(x.last().unwrap().clone());
        prop_assert_eq!(un(OpKind::Echo, &x), echoed);
        prop_assert_eq!(un(OpKind::Shift, &x).len(), x.len());
    }

    #[test]
    fn removal_projections(x in symbols(), y in symbols()) {
        let bin = |op| eval_expr(&Expr::apply(op, vec![Expr::Leaf(x.clone()), Expr::Leaf(y.clone())]));
        prop_assert_eq!(bin(OpKind::RemoveSecond), x.clone());
        prop_assert_eq!(bin(OpKind::RemoveFirst), y.clone());
        prop_assert_eq!(bin(OpKind::Append), [x.clone(), y.clone()].concat());
        prop_assert_eq!(bin(OpKind::Prepend), [y.clone(), x.clone()].concat());
    }
}

#[test]
fn mixed_generation_is_roughly_uniform() {
    let cfg = GenConfig {
        n_train: 83_000,
        n_val: 0,
        seed: 3,
        ..GenConfig::default()
    };
    let (train, _) = gen_mixed(&cfg).unwrap();
    assert_eq!(train.len(), 83_000);
    let mut counts = [0usize; 10];
    for s in &train {
        let op = OpKind::from_name(&s.source[0]).unwrap();
        counts[OpKind::ALL.iter().position(|o| *o == op).unwrap()] += 1;
    }
    let expected = 8_300.0;
    for (op, c) in OpKind::ALL.iter().zip(counts) {
        assert!(((c as f64 - expected) / expected).abs() <= 0.05, "{} drawn {} times", op, c);
    }
}

#[test]
fn generated_samples_round_trip() {
    let cfg = GenConfig {
        n_train: 10_000,
        n_val: 0,
        p_recurse: 0.3,
        max_depth: 3,
        seed: 9,
        ..GenConfig::default()
    };
    let (train, _) = gen_mixed(&cfg).unwrap();
    for s in &train {
        let e = parse_source(&s.source).unwrap();
        assert_eq!(render(&e), s.source);
        assert_eq!(eval_expr(&e), s.target);
    }
    assert!(train.iter().any(|s| parse_source(&s.source).unwrap().depth() > 1));
}
