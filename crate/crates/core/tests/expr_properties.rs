use kolmo::expr::ast::{BinOp, Func, Node};
use kolmo::expr::{BatchBindings, Bindings, Expression};
use proptest::prelude::*;

const DIM: usize = 3;

fn leaf() -> impl Strategy<Value = Node> {
    prop_oneof![
        (0u32..6).prop_map(|k| Node::Num(k as f64)),
        (0.0f64..50.0).prop_map(Node::Num),
        (1e-8f64..1e8).prop_map(Node::Num),
        Just(Node::T),
        Just(Node::V),
        (0..DIM).prop_map(Node::X),
    ]
}

fn binop() -> impl Strategy<Value = BinOp> {
    prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div), Just(BinOp::Pow)]
}

fn unary() -> impl Strategy<Value = Func> {
    prop_oneof![
        Just(Func::Exp),
        Just(Func::Log),
        Just(Func::Sin),
        Just(Func::Cos),
        Just(Func::Tanh),
        Just(Func::Sqrt),
        Just(Func::Abs)
    ]
}

fn tree() -> impl Strategy<Value = Node> {
    leaf().prop_recursive(5, 48, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Node::Neg(Box::new(a))),
            (binop(), inner.clone(), inner.clone()).prop_map(|(op, a, b)| Node::Bin(op, Box::new(a), Box::new(b))),
            (unary(), inner.clone()).prop_map(|(f, a)| Node::Call(f, vec![a])),
            (prop_oneof![Just(Func::Min), Just(Func::Max)], inner.clone(), inner.clone())
                .prop_map(|(f, a, b)| Node::Call(f, vec![a, b])),
            (inner.clone(), inner.clone(), inner).prop_map(|(a, b, c)| Node::Call(Func::Clip, vec![a, b, c])),
        ]
    })
}

fn expression(node: Node) -> Expression {
    Expression::from_node(String::new(), node, DIM)
}

/// Sum of `c x1^a x2^b x3^e` with `a + b + e <= 4`.
fn polynomial() -> impl Strategy<Value = Vec<(f64, [i32; 3])>> {
    let monomial = (-5.0f64..5.0, 0i32..5, 0i32..5, 0i32..5).prop_filter_map("degree at most 4", |(c, a, b, e)| {
        (a + b + e <= 4).then_some((c, [a, b, e]))
    });
    prop::collection::vec(monomial, 1..6)
}

fn polynomial_source(terms: &[(f64, [i32; 3])]) -> String {
    terms
        .iter()
        .map(|(c, p)| format!("({c:?})*x1^{}*x2^{}*x3^{}", p[0], p[1], p[2]))
        .collect::<Vec<_>>()
        .join(" + ")
}

fn polynomial_gradient(terms: &[(f64, [i32; 3])], x: &[f64; 3]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (c, p) in terms {
        for (i, gi) in g.iter_mut().enumerate() {
            if p[i] == 0 {
                continue;
            }
            let mut term = c * p[i] as f64;
            for (j, xj) in x.iter().enumerate() {
                let e = if i == j { p[j] - 1 } else { p[j] };
                term *= xj.powi(e);
            }
            *gi += term;
        }
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn pretty_print_round_trips(node in tree()) {
        let e = expression(node);
        let reparsed = Expression::parse(&e.pretty(), DIM, true).unwrap();
        prop_assert_eq!(reparsed.ast(), e.ast());
    }

    #[test]
    fn evaluation_is_pure(node in tree(), t in 0.0f64..2.0, x in prop::array::uniform3(-5.0f64..5.0), v in -5.0f64..5.0) {
        let e = expression(node);
        let b = Bindings::with_v(t, &x, v);
        match (e.eval(&b), e.eval(&b)) {
            (Ok(a), Ok(c)) => prop_assert_eq!(a.to_bits(), c.to_bits()),
            (a, c) => prop_assert_eq!(a, c),
        }
    }

    #[test]
    fn batch_evaluation_matches_scalar(
        node in tree(),
        lanes in prop::collection::vec((0.0f64..2.0, prop::array::uniform3(-5.0f64..5.0), -5.0f64..5.0), 1..70),
    ) {
        let e = expression(node);
        let n = lanes.len();
        let ts: Vec<f64> = lanes.iter().map(|l| l.0).collect();
        let vs: Vec<f64> = lanes.iter().map(|l| l.2).collect();
        let xs: Vec<f64> = (0..DIM).flat_map(|i| lanes.iter().map(move |l| l.1[i])).collect();
        let scalar: Vec<_> = lanes.iter().map(|(t, x, v)| e.eval(&Bindings::with_v(*t, x, *v))).collect();
        let mut out = vec![0.0; n];
        let mut ok = true;
        for start in (0..n).step_by(64) {
            let end = (start + 64).min(n);
            let chunk_x: Vec<f64> = (0..DIM).flat_map(|i| xs[i * n + start..i * n + end].iter().copied()).collect();
            let b = BatchBindings { t: &ts[start..end], x: &chunk_x, v: Some(&vs[start..end]) };
            ok &= e.eval_batch(&b, &mut out[start..end]).is_ok();
        }
        if scalar.iter().all(|r| r.is_ok()) {
            prop_assert!(ok);
            for (s, b) in scalar.iter().zip(&out) {
                prop_assert_eq!(s.as_ref().unwrap().to_bits(), b.to_bits());
            }
        } else {
            prop_assert!(!ok);
        }
    }

    #[test]
    fn fd_gradient_matches_polynomial_derivative(terms in polynomial(), x in prop::array::uniform3(-5.7f64..5.7)) {
        let e = Expression::parse(&polynomial_source(&terms), DIM, false).unwrap();
        let fd = e.gradient_fd(&Bindings::new(0.0, &x), 1e-5).unwrap();
        let exact = polynomial_gradient(&terms, &x);
        let err = fd.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = exact.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-5 * norm.max(1.0), "{fd:?} vs {exact:?}");
    }

    #[test]
    fn out_of_range_variables_are_rejected(k in 4usize..20) {
        let outside = format!("x{k} + 1");
        let inside = format!("x{}", k.min(DIM));
        prop_assert!(Expression::parse(&outside, DIM, false).is_err());
        prop_assert!(Expression::parse(&inside, DIM, false).is_ok());
    }

    #[test]
    fn subtraction_and_division_associate_left(a in 1.0f64..9.0, b in 1.0f64..9.0, c in 1.0f64..9.0) {
        let x = [a, b, c];
        let sub = Expression::parse("x1 - x2 - x3", DIM, false).unwrap().eval_at(0.0, &x, None).unwrap();
        prop_assert_eq!(sub, (a - b) - c);
        let div = Expression::parse("x1 / x2 / x3", DIM, false).unwrap().eval_at(0.0, &x, None).unwrap();
        prop_assert_eq!(div, (a / b) / c);
        let y = [a / 4.0, b / 4.0, c / 4.0];
        let pow = Expression::parse("x1 ^ x2 ^ x3", DIM, false).unwrap().eval_at(0.0, &y, None).unwrap();
        prop_assert_eq!(pow, y[0].powf(y[1].powf(y[2])));
    }
}
