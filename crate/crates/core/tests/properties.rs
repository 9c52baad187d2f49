mod common;

use proptest::prelude::*;

use dtsim::comm::{
    bucketed_grad_reduce, cost_model_eval, fused_nd_grad_reduce, per_tensor_grad_reduce, ring_closed_form, Collective, CostParams, Ledger,
};
use dtsim::dispatch::{propagate, Call, Dispatcher, Env, Mode};
use dtsim::dtensor::{DTensor, DTensorMeta};
use dtsim::engine::{DType, Op, ReduceOp, Tensor};
use dtsim::placement::{merge_local_tensors, shard_tensor, Placement, ShardSpec, ShardView};
use dtsim::plan::{lower, Model, Plan, PlanIr};
use dtsim::rng::{fill_random, random_locals, random_tensor, Distribution, RngState};

use common::{close, mesh, partial_dtensor, sum_terms};

fn mesh_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=3, 1..=3)
}

fn tensor_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=7, 1..=3)
}

/// One placement per mesh dim, from Replicate, Shard of any tensor dim and
/// optionally Partial.
fn placements(ndim_mesh: usize, rank: usize, partial: bool) -> impl Strategy<Value = Vec<Placement>> {
    let choices = rank + 1 + usize::from(partial);
    prop::collection::vec(0..choices, ndim_mesh).prop_map(move |v| {
        v.into_iter()
            .map(|c| match c {
                0 => Placement::Replicate,
                c if c <= rank => Placement::Shard(c - 1),
                _ => Placement::P,
            })
            .collect()
    })
}

fn case(partial_src: bool) -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<Placement>, Vec<Placement>, u64)> {
    (mesh_shape(), tensor_shape()).prop_flat_map(move |(m, s)| {
        let (n, r) = (m.len(), s.len());
        (Just(m), Just(s), placements(n, r, partial_src), placements(n, r, false), any::<u64>())
    })
}

/// A tensor with the given placements whose Partial dims hold independent
/// contributions, and its global value.
fn build(mesh: &dtsim::mesh::DeviceMesh, pl: &[Placement], shape: &[usize], dtype: DType, seed: u64) -> (DTensor, Tensor, Vec<f64>) {
    let start: Vec<Placement> = pl.iter().map(|p| if p.is_partial() { *p } else { Placement::Replicate }).collect();
    let (a, terms) = partial_dtensor(mesh, &start, shape, dtype, seed);
    let (g, scale) = sum_terms(&terms);
    (a.redistribute(pl, &mut Ledger::default()).unwrap(), g, scale)
}

fn global(shape: &[usize], dtype: DType, seed: u64) -> Tensor {
    random_tensor(shape, &common::values(dtype), &mut RngState::new(seed), 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn shard_then_merge_is_identity((m, shape, pl, _, seed) in case(false), int in any::<bool>()) {
        let dtype = if int { DType::I64 } else { DType::F64 };
        let g = global(&shape, dtype, seed);
        let spec = ShardSpec::new(mesh(&m), pl);
        let locals = shard_tensor(&g, &spec).unwrap();
        let views: Vec<ShardView> = spec.mesh.coords().map(|c| spec.view(&shape, &c).unwrap()).collect();
        prop_assert_eq!(views.iter().map(|v| v.numel()).collect::<Vec<_>>(), locals.iter().map(|t| t.numel()).collect::<Vec<_>>());
        prop_assert!(merge_local_tensors(&spec, &shape, &locals).unwrap().bit_eq(&g));
    }

    #[test]
    fn shards_cover_each_element_once_per_replica((m, shape, pl, _, _) in case(false)) {
        let spec = ShardSpec::new(mesh(&m), pl.clone());
        let n: usize = shape.iter().product();
        let mut hits = vec![0usize; n];
        for c in spec.mesh.coords() {
            for i in spec.view(&shape, &c).unwrap().global_indices() {
                hits[i] += 1;
            }
        }
        let replicas: usize = pl.iter().enumerate().filter(|(_, p)| p.is_replicate()).map(|(d, _)| m[d]).product();
        prop_assert!(hits.iter().all(|&h| h == replicas));
    }

    #[test]
    fn redistribute_preserves_global((m, shape, src, dst, seed) in case(true)) {
        let mesh = mesh(&m);
        let (a, g, _) = build(&mesh, &src, &shape, DType::I64, seed);
        let mut ledger = Ledger::default();
        prop_assert_eq!(a.placements(), src.as_slice());
        prop_assert!(a.to_global().unwrap().bit_eq(&g));
        let b = a.redistribute(&dst, &mut ledger).unwrap();
        prop_assert_eq!(b.placements(), dst.as_slice());
        prop_assert!(b.to_global().unwrap().bit_eq(&g));
        let canonical = DTensor::distribute(&g, ShardSpec::new(mesh.clone(), dst)).unwrap();
        prop_assert!(b.locals().iter().zip(canonical.locals()).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn redistribute_from_partial_sums_contributions((m, shape, src, dst, seed) in case(true)) {
        let mesh = mesh(&m);
        let mut src = src;
        src[0] = Placement::P;
        let src: Vec<Placement> = src.into_iter().map(|p| if p.is_shard() { Placement::Replicate } else { p }).collect();
        let (a, terms) = partial_dtensor(&mesh, &src, &shape, DType::F64, seed);
        let (want, scale) = sum_terms(&terms);
        let b = a.redistribute(&dst, &mut Ledger::default()).unwrap();
        prop_assert!(close(&b.to_global().unwrap(), &want, &scale, 1e-12));
    }

    #[test]
    fn sharded_generation_is_single_device(
        (m, shape, pl, _, seed) in case(false),
        theta in prop::sample::select(vec![1u64, 3, 64, 65536]),
        threads in 1usize..=64,
        op in 0usize..4,
    ) {
        let dist = [
            Distribution::uniform01(DType::F64),
            Distribution::standard_normal(DType::F64),
            Distribution::Randint { lo: -5, hi: 9 },
            Distribution::Bernoulli { p: 0.3 },
        ][op];
        let base = RngState::with_theta(seed, theta).unwrap();
        let mut single = base;
        let want = random_tensor(&shape, &dist, &mut single, 1).unwrap();
        let spec = ShardSpec::new(mesh(&m), pl);
        let mut state = base;
        let locals = random_locals(&spec, &shape, &dist, &mut state, threads).unwrap();
        prop_assert!(merge_local_tensors(&spec, &shape, &locals).unwrap().bit_eq(&want));
        prop_assert_eq!(state, single);
    }

    #[test]
    fn offset_advance_skips_whole_rows(theta in 1u64..=16, rows in 1usize..=4, extra in 1usize..=40, seed in any::<u64>()) {
        let dist = Distribution::standard_normal(DType::F64);
        let base = RngState::with_theta(seed, theta).unwrap();
        let skip = rows * theta as usize;
        let long = fill_random(&ShardView::full(&[skip + extra]), &base, &dist, 1).unwrap();
        let mut later = base;
        later.advance(skip);
        prop_assert_eq!(later.offset, rows as u64);
        let short = fill_random(&ShardView::full(&[extra]), &later, &dist, 1).unwrap();
        let (long, short) = (long.to_f64_vec(), short.to_f64_vec());
        prop_assert_eq!(&long[skip..], short.as_slice());
        let mut s = base;
        s.advance(skip + extra);
        prop_assert_eq!(s.offset, ((skip + extra) as u64).div_ceil(theta));
    }

    #[test]
    fn cached_dispatch_matches_uncached(
        (m, pa, pb, seed) in mesh_shape().prop_flat_map(|m| {
            let n = m.len();
            (Just(m), placements(n, 2, true), placements(n, 2, false), any::<u64>())
        }),
        op in 0usize..3,
        dims in prop::collection::vec(1usize..=6, 3),
    ) {
        let mesh = mesh(&m);
        let (op, sa, sb) = match op {
            0 => (Op::Mm, vec![dims[0], dims[1]], vec![dims[1], dims[2]]),
            1 => (Op::Add, vec![dims[0], dims[1]], vec![dims[0], dims[1]]),
            _ => (Op::Mul, vec![dims[0], dims[1]], vec![dims[0], dims[1]]),
        };
        let pa: Vec<Placement> = pa.iter().map(|p| if p.is_partial() && op == Op::Mul { Placement::Replicate } else { *p }).collect();
        let (a, _, _) = build(&mesh, &pa, &sa, DType::I64, seed);
        let (b, _, _) = build(&mesh, &pb, &sb, DType::I64, seed + 1);

        let mut cached = Dispatcher::new(Mode::Dynamic);
        let mut fresh = Dispatcher::new(Mode::Dynamic);
        fresh.set_cache_enabled(false);
        let (mut e1, mut e2) = (Env::new(RngState::new(0)), Env::new(RngState::new(0)));
        let first = cached.dispatch(&mut e1, Call::new("s", &op, vec![&a, &b]));
        let second = cached.dispatch(&mut e1, Call::new("s", &op, vec![&a, &b]));
        let plain = fresh.dispatch(&mut e2, Call::new("s", &op, vec![&a, &b]));
        match (first, second, plain) {
            (Ok(x), Ok(y), Ok(z)) => {
                for t in [&y, &z] {
                    prop_assert_eq!(x.placements(), t.placements());
                    prop_assert!(x.locals().iter().zip(t.locals()).all(|(p, q)| p.bit_eq(q)));
                }
                prop_assert!(x.to_global().unwrap().bit_eq(&dtsim::engine::Eager.run(&op, &a, &b)));
                if cached.counters().bypass.is_empty() {
                    prop_assert_eq!(cached.counters().inferences, 1);
                    prop_assert_eq!(cached.counters().hits, 1);
                }
            }
            (Err(x), Err(y), Err(z)) => {
                prop_assert_eq!(x.to_string(), y.to_string());
                prop_assert_eq!(x.to_string(), z.to_string());
            }
            _ => prop_assert!(false, "cache changed success"),
        }
        let metas: Vec<&DTensorMeta> = vec![&a.meta, &b.meta];
        prop_assert_eq!(propagate(&op, &metas), propagate(&op, &metas));
    }

    #[test]
    fn lowered_ir_is_a_fixed_point(picks in prop::collection::vec(0usize..10, 0..8), strict in any::<bool>()) {
        let pool = [
            "shard fc1.weight S(1) @TP",
            "shard fc1.weight S(0) @TP",
            "shard fc2.weight S(0) @TP",
            "shard fc\\d.weight R @DP run",
            "shard fc2.weight S(0) @DP init",
            "redistribute fc1.<in> ->R @TP",
            "redistribute fc2.<out> P->R @TP",
            "annotate fc2.<out> S(0) @DP",
            "factory input.<out> S(0) @DP",
            "redistribute fc1.weight.grad ->S(0) @DP",
        ];
        let text: String = picks.iter().map(|&i| format!("{}\n", pool[i])).collect();
        let model = Model::mlp(&[4, 8, 4], 0.1, DType::F64, |_, _| Distribution::standard_normal(DType::F64));
        let m = dtsim::mesh::DeviceMesh::from_shape("M", &[("DP", 2), ("TP", 2)]).unwrap();
        let plan = Plan::parse(&text).unwrap();
        if let Ok(ir) = lower(&plan, &model.tensor_paths(4), &m, strict) {
            let once = ir.optimize();
            prop_assert_eq!(&once, &ir);
            prop_assert_eq!(&once.optimize(), &once);
            prop_assert_eq!(&PlanIr::parse(&ir.dump()).unwrap(), &ir);
            let doubled = Plan::parse(&format!("{text}{text}")).unwrap();
            prop_assert_eq!(&lower(&doubled, &model.tensor_paths(4), &m, strict).unwrap(), &ir);
        }
    }

    #[test]
    fn fused_never_costs_more(p in prop::collection::vec(1usize..=64, 1..=4), s in 1.0f64..1e9, b in 1e-12f64..1.0) {
        let r = cost_model_eval(&CostParams { s, b, p: p.clone() });
        prop_assert!(r.t_fused <= r.t_vanilla * (1.0 + 1e-12));
        prop_assert!(r.ratio >= 1.0 - 1e-12);
        prop_assert!(r.ratio <= p.len() as f64 + 1e-12);
    }

    #[test]
    fn reduce_strategies_agree(
        m in mesh_shape(),
        parts in prop::collection::vec((tensor_shape(), prop::collection::vec(any::<bool>(), 3)), 1..=6),
        bucket in 1usize..=512,
        seed in any::<u64>(),
    ) {
        let mesh = mesh(&m);
        let mut grads = Vec::new();
        let mut sums = Vec::new();
        for (i, (shape, partial)) in parts.iter().enumerate() {
            let pl: Vec<Placement> = (0..m.len()).map(|d| if partial[d] { Placement::P } else { Placement::Replicate }).collect();
            let (g, terms) = partial_dtensor(&mesh, &pl, shape, DType::I64, seed.wrapping_add(i as u64));
            grads.push(g);
            sums.push(sum_terms(&terms).0);
        }
        let (mut per, mut buck, mut fused) = (grads.clone(), grads.clone(), grads);
        let (mut lp, mut lb, mut lf) = (Ledger::default(), Ledger::default(), Ledger::default());
        let rp = per_tensor_grad_reduce(&mut per, &mut lp).unwrap();
        let rb = bucketed_grad_reduce(&mut buck, bucket, &mut lb).unwrap();
        let rf = fused_nd_grad_reduce(&mut fused, bucket, &mut lf).unwrap();
        for i in 0..sums.len() {
            for g in [&per[i], &buck[i], &fused[i]] {
                prop_assert!(g.placements().iter().all(Placement::is_replicate));
                prop_assert!(g.to_global().unwrap().bit_eq(&sums[i]));
            }
        }
        prop_assert!(rf.collectives <= rp.collectives);
        prop_assert!(rb.collectives <= rp.collectives);
        prop_assert_eq!(rp.skipped, rf.skipped);
    }

    #[test]
    fn ring_bytes_match_closed_form(p in 1usize..=16, k in 1usize..=9, wide in any::<bool>()) {
        let shape = if wide { vec![2, p] } else { vec![p] };
        let m = mesh(&shape);
        let dim = shape.len() - 1;
        let elems = k * p;
        let s = 8 * elems as u64;
        let mut ledger = Ledger::default();
        let mut bufs: Vec<Tensor> = (0..m.size()).map(|i| Tensor::full(&[elems], DType::F64, i as f64).unwrap()).collect();
        ledger.all_reduce(&m, &[dim], &mut bufs, ReduceOp::Sum, "ar").unwrap();
        let parts: Vec<Tensor> = (0..m.size()).map(|_| Tensor::zeros(&[k], DType::F64)).collect();
        ledger.all_gather(&m, dim, &parts, "ag").unwrap();
        let chunks: Vec<Vec<Tensor>> = (0..m.size()).map(|_| (0..p).map(|_| Tensor::zeros(&[k], DType::F64)).collect()).collect();
        ledger.reduce_scatter(&m, dim, &chunks, ReduceOp::Sum, "rs").unwrap();
        prop_assert_eq!(ledger.entries[0].bytes_per_device, 2 * s * (p as u64 - 1) / p as u64);
        for e in &ledger.entries {
            prop_assert_eq!(e.s, s);
            prop_assert_eq!(Some(e.bytes_per_device), ring_closed_form(e.collective, e.s, e.p));
        }
        prop_assert_eq!(ledger.count(Collective::AllGather), 1);
    }
}

trait Reference {
    fn run(&mut self, op: &Op, a: &DTensor, b: &DTensor) -> Tensor;
}

impl Reference for dtsim::engine::Eager {
    fn run(&mut self, op: &Op, a: &DTensor, b: &DTensor) -> Tensor {
        use dtsim::engine::Backend;
        self.apply("ref", op, &[&a.to_global().unwrap(), &b.to_global().unwrap()]).unwrap()
    }
}
