use progsynth::gp::{gp_grammar, gp_loglik, log_likelihood_bound, Kernel, TimeSeries, JITTER};
use progsynth::mixture::{Hyper, MixtureSampler, MoveKind, Table, TableSchema};
use progsynth::sexpr::{parse, Address, Atom, Expr, Item};
use progsynth::Grammar;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_atom() -> impl Strategy<Value = Atom> {
    let num = prop_oneof![
        (-1000i64..1000).prop_map(|i| i as f64),
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        (-1e6f64..1e6),
    ];
    prop_oneof![
        num.clone().prop_map(Atom::Num),
        "[a-z][a-z0-9_]{0,6}".prop_map(Atom::Sym),
        prop::collection::vec(num.prop_map(Atom::Num), 1..4).prop_map(Atom::List),
    ]
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let tag = prop::sample::select(vec!["+", "*", "cp", "lin", "gamma", "block", "k_1"]);
    let leaf = (tag.clone(), prop::collection::vec(arb_atom(), 0..3))
        .prop_map(|(t, atoms)| Expr::new(t, atoms.into_iter().map(Item::Atom).collect()));
    leaf.prop_recursive(4, 40, 4, move |inner| {
        (tag.clone(), prop::collection::vec(prop_oneof![inner.prop_map(Item::Expr), arb_atom().prop_map(Item::Atom)], 0..4))
            .prop_map(|(t, items)| Expr::new(t, items))
    })
}

fn prior_draw(g: &Grammar, seed: u64) -> Expr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.sample(g.start_symbol(), &mut rng).unwrap()
}

fn pick_address(e: &Expr, k: usize) -> Address {
    let addrs = e.addresses();
    addrs[k % addrs.len()].clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn print_parse_round_trip(e in arb_expr()) {
        let text = e.to_string();
        prop_assert_eq!(parse(&text).unwrap(), e);
    }

    #[test]
    fn sever_then_fill_restores(seed in any::<u64>(), k in any::<usize>()) {
        let g = gp_grammar();
        let e = prior_draw(&g, seed);
        let a = pick_address(&e, k);
        let (_, hole) = e.sever(&g, &a).unwrap();
        let sub = e.subexpr(&a).unwrap().clone();
        prop_assert_eq!(hole.fill(&g, sub).unwrap(), e);
    }

    #[test]
    fn prior_factorizes_at_any_hole(seed in any::<u64>(), k in any::<usize>(), other in any::<u64>()) {
        let g = gp_grammar();
        let e = prior_draw(&g, seed);
        let a = pick_address(&e, k);
        let (nt, hole) = e.sever(&g, &a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(other);
        let replacement = g.sample(nt, &mut rng).unwrap();
        let e2 = hole.fill(&g, replacement.clone()).unwrap();
        let context = g.prior_logdensity(&e) - g.expand_logdensity(nt, e.subexpr(&a).unwrap());
        let context2 = g.prior_logdensity(&e2) - g.expand_logdensity(nt, &replacement);
        prop_assert!((context - context2).abs() < 1e-9 * (1.0 + context.abs()));
    }

    #[test]
    fn prior_draws_are_well_formed_kernels(seed in any::<u64>()) {
        let g = gp_grammar();
        let e = prior_draw(&g, seed);
        prop_assert!(g.prior_logdensity(&e).is_finite());
        let k = Kernel::from_expr(&e).unwrap();
        for (_, node) in e.nodes() {
            let expected = match node.tag() {
                "const" | "wn" | "lin" | "se" => Some(1),
                "per" | "+" | "*" => Some(2),
                "cp" => Some(3),
                _ => None,
            };
            if let Some(n) = expected {
                prop_assert_eq!(node.child_count(), n);
            }
        }
        let xs: Vec<f64> = (0..6).map(|i| i as f64 * 0.7).collect();
        let c = k.cov_matrix(&xs);
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                prop_assert!((c[(i, j)] - c[(j, i)]).abs() <= 1e-12 * (1.0 + c[(i, j)].abs()));
            }
            prop_assert!(c[(i, i)] >= JITTER);
        }
    }

    #[test]
    fn covariance_is_positive_definite_and_likelihood_bounded(
        seed in any::<u64>(),
        xs in prop::collection::vec(-5.0f64..5.0, 1..16),
        ys_seed in any::<u64>(),
    ) {
        let g = gp_grammar();
        let k = Kernel::from_expr(&prior_draw(&g, seed)).unwrap();
        let c = k.cov_matrix(&xs);
        let scale = c.diagonal().max();
        // Gram matrices far beyond unit scale can lose definiteness to rounding.
        prop_assume!(scale < 1e6);
        prop_assert!(c.clone().cholesky().is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(ys_seed);
        let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let ts = TimeSeries::new(xs.clone(), ys).unwrap();
        let ll = gp_loglik(&k, &ts).unwrap();
        prop_assert!(ll <= log_likelihood_bound(xs.len()) + 1e-9);
    }
}

fn small_table(seed: u64) -> Table {
    let schema = TableSchema::from_compact("a:numeric,b:count,c:nominal(3),d:numeric").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..12)
        .map(|_| {
            let mut row = vec![
                Some(rng.random_range(-4.0..4.0)),
                Some(rng.random_range(0..6) as f64),
                Some(rng.random_range(1..=3) as f64),
                Some(rng.random_range(-1.0..1.0)),
            ];
            if rng.random_bool(0.2) {
                row[rng.random_range(0..4)] = None;
            }
            row
        })
        .collect();
    Table::new(schema, rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mixture_moves_preserve_invariants(seed in any::<u64>()) {
        let table = small_table(seed);
        let sampler = MixtureSampler::new(&table, Hyper::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut state = sampler.initial(&mut rng);
        let kinds = [MoveKind::Column, MoveKind::SplitMerge, MoveKind::Weight, MoveKind::Parameter, MoveKind::Refresh];
        for step in 0..300 {
            sampler.apply(&mut state, kinds[step % kinds.len()], &mut rng);
            let mut seen = [0usize; 4];
            for sb in &state.blocks {
                for &c in &sb.block.columns {
                    seen[c] += 1;
                }
                prop_assert_eq!(sb.block.total_weight(), 12);
                prop_assert!(sb.block.clusters.iter().all(|c| c.weight >= 1 && c.dists.len() == sb.block.columns.len()));
                prop_assert!((sb.score - sampler.score(&sb.block)).abs() < 1e-9 * (1.0 + sb.score.abs()));
            }
            prop_assert_eq!(seen, [1, 1, 1, 1]);
        }
        let program = state.program();
        let total = program.loglik(&table).unwrap();
        let split: f64 = program.blocks.iter().map(|b| b.loglik(&table)).sum();
        prop_assert!((total - split).abs() < 1e-9 * (1.0 + total.abs()));
    }
}
