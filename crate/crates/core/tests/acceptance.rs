//! Acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use cdtree_core::eval::{cdtree_marginal, eval_ratios_with, plan_depth, truncated_marginal, Strategy};
use cdtree_core::mixing::{
    augment_permissive, check_positively_alignable, extension_ratios, fit_decay_rate, measure_ssm, measure_vssm,
    LambdaShape, MixingProfile, Permissive, VssmOptions,
};
use cdtree_core::model::{Spin, Vertex};
use cdtree_core::num::{int, ratio};
use cdtree_core::oracle::{gibbs_marginal, partition_function, OracleConfig};
use cdtree_core::partition::{find_consistent, partition_telescoping, Engine};
use cdtree_core::tree::build_cd_tree;
use cdtree_core::{
    eval_ratios, hyper_marginal, ratio_by_recursion, BoundaryCondition, BoundaryInitialization,
    ComputeError, Graph, Matrix, Model, Rational, Scalar, SpinSystem,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn is_skip(e: &ComputeError) -> bool {
    matches!(e, ComputeError::ZeroDenominator { .. } | ComputeError::NoFeasibleReference)
}

/// Random graphs: CD tree, split recursion and enumeration agree exactly.
fn graph_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = OracleConfig::default();
    let (mut compared, mut infeasible, mut mismatches) = (0, 0, Vec::new());
    let (mut tree_skips, mut split_skips, mut ref_checks) = (0, 0, 0);
    while compared < 500 {
        let inst = common::graph_instance(&mut rng, 8, &[2, 3, 5]);
        let (m, v) = (&inst.model, inst.vertex);
        let exact = match gibbs_marginal::<Rational>(m, v, &cfg) {
            Ok(p) => p,
            Err(ComputeError::ZeroPartitionFunction) => {
                infeasible += 1;
                continue;
            }
            Err(e) => panic!("oracle failed: {e}"),
        };
        compared += 1;
        // Every reference spin with positive probability; an engine "solves"
        // the instance when at least one reference goes through.
        let (mut tree_ok, mut split_ok) = (false, false);
        for r in (0..m.q()).filter(|&r| !exact.probs[r].is_zero()) {
            let want: Vec<Rational> = exact.probs.iter().map(|p| p / &exact.probs[r]).collect();
            let tree = build_cd_tree(m, v, r, None).unwrap();
            match eval_ratios::<Rational>(m, &tree, &BoundaryInitialization::AllOnes) {
                Ok(got) if got.ratios == want => {
                    ref_checks += 1;
                    tree_ok = true;
                }
                Ok(_) => mismatches.push(format!("cd-tree ratios, reference {r}, instance {compared}")),
                Err(e) if is_skip(&e) => {}
                Err(e) => mismatches.push(format!("cd-tree error {e}")),
            }
            match ratio_by_recursion::<Rational>(m, v, r) {
                Ok(got) if got.ratios == want => {
                    ref_checks += 1;
                    split_ok = true;
                }
                Ok(_) => mismatches.push(format!("split ratios, reference {r}, instance {compared}")),
                Err(e) if is_skip(&e) => {}
                Err(e) => mismatches.push(format!("split error {e}")),
            }
        }
        tree_skips += usize::from(!tree_ok);
        split_skips += usize::from(!split_ok);
    }
    Outcome {
        pass: mismatches.is_empty(),
        detail: format!(
            "{compared} instances, {ref_checks} per-reference ratio checks, {infeasible} infeasible boundaries regenerated, \
             no-feasible-reference: cd-tree {tree_skips}, split {split_skips}{}",
            first(&mismatches)
        ),
    }
}

/// Five-vertex hypergraph plus random hypergraphs: joint recursion equals
/// enumeration exactly.
fn hypergraph_equivalence() -> Outcome {
    let cfg = OracleConfig::default();
    let mut mismatches = Vec::new();
    for q in [2, 3] {
        let m = common::five_vertex_hypergraph(q);
        for v in 0..5 {
            if hyper_marginal::<Rational>(&m, v) != gibbs_marginal(&m, v, &cfg) {
                mismatches.push(format!("five-vertex hypergraph q={q} v={v}"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut compared, mut infeasible, mut skips) = (0, 0, 0);
    while compared < 200 {
        let inst = common::hypergraph_instance(&mut rng, 7, &[2, 3]);
        let (m, v) = (&inst.model, inst.vertex);
        let exact = match gibbs_marginal::<Rational>(m, v, &cfg) {
            Ok(p) => p,
            Err(ComputeError::ZeroPartitionFunction) => {
                infeasible += 1;
                continue;
            }
            Err(e) => panic!("oracle failed: {e}"),
        };
        compared += 1;
        match hyper_marginal::<Rational>(m, v) {
            Ok(p) if p == exact => {}
            Ok(_) => mismatches.push(format!("hypergraph instance {compared}")),
            Err(e) if is_skip(&e) => skips += 1,
            Err(e) => mismatches.push(format!("error {e}")),
        }
    }
    Outcome {
        pass: mismatches.is_empty(),
        detail: format!(
            "five-vertex hypergraph (q=2,3, all vertices) + {compared} random hypergraphs, {infeasible} infeasible regenerated, \
             {skips} without feasible pivot{}",
            first(&mismatches)
        ),
    }
}

/// Six-vertex example graph a..f (0..5): b, c frozen to colors 2, 3 and
/// reference color 4 (indices 1, 2, 3) for 5-colorings rooted at a.
fn worked_example() -> Outcome {
    let edges = [(0, 1), (0, 2), (0, 3), (2, 3), (3, 4), (3, 5), (4, 5)];
    let m = Model::graph(
        SpinSystem::coloring(5),
        Graph::new(6, &edges).unwrap(),
        BoundaryCondition::from_pairs([(1, 1), (2, 2)]),
    )
    .unwrap();
    let mut problems = Vec::new();
    let tree = build_cd_tree(&m, 0, 3, None).unwrap();
    let want_r = vec![int(1), int(0), int(0), int(1), int(1)];
    match eval_ratios::<Rational>(&m, &tree, &BoundaryInitialization::AllOnes) {
        Ok(r) if r.ratios == want_r => {}
        other => problems.push(format!("cd-tree ratios {other:?}")),
    }
    match ratio_by_recursion::<Rational>(&m, 0, 3) {
        Ok(r) if r.ratios == want_r => {}
        other => problems.push(format!("split ratios {other:?}")),
    }
    let third = ratio(1, 3);
    let want_p = vec![third.clone(), int(0), int(0), third.clone(), third];
    let exact = gibbs_marginal::<Rational>(&m, 0, &OracleConfig::default()).unwrap();
    if exact.probs != want_p {
        problems.push(format!("enumeration gives {:?}", exact.to_f64()));
    }
    let (p, _, _) = cdtree_marginal::<Rational>(&m, 0, None, Some(3), &BoundaryInitialization::AllOnes, Strategy::Memoized).unwrap();
    if p != exact {
        problems.push("cd-tree marginal differs".into());
    }
    Outcome {
        pass: problems.is_empty(),
        detail: format!(
            "reconstructed six-vertex graph, {} tree nodes, {} coupling lines: R = (1,0,0,1,1), p = 1/3 on colors 1,4,5{}",
            tree.len(),
            tree.coupling_lines().len(),
            first(&problems)
        ),
    }
}

/// Complete tree in which every internal node has `d` children.
fn d_ary_tree(d: usize, depth: usize) -> Graph {
    let mut edges = Vec::new();
    let mut frontier = vec![0];
    let mut next = 1;
    for _ in 0..depth {
        let mut grown = Vec::new();
        for &v in &frontier {
            for _ in 0..d {
                edges.push((v, next));
                grown.push(next);
                next += 1;
            }
        }
        frontier = grown;
    }
    Graph::new(next, &edges).unwrap()
}

/// Naive truncated evaluation visits grow like `((q-1) D)^l`.
fn cost_model() -> Outcome {
    let q = 3;
    let mut lines = Vec::new();
    let mut pass = true;
    for d in [2, 3] {
        let m = Model::graph(SpinSystem::coloring(q), d_ary_tree(d, 5), BoundaryCondition::new()).unwrap();
        let base = ((q - 1) * d) as f64;
        let visits: Vec<f64> = (1..=4)
            .map(|l| {
                let t = build_cd_tree(&m, 0, 0, Some(l)).unwrap();
                let (_, stats) = eval_ratios_with::<Rational>(&m, &t, &BoundaryInitialization::AllOnes, Strategy::Naive).unwrap();
                stats.node_visits as f64
            })
            .collect();
        // Least-squares constant on the log scale.
        let log_c = visits.iter().enumerate().map(|(k, v)| v.ln() - (k as f64 + 1.0) * base.ln()).sum::<f64>() / 4.0;
        let c = log_c.exp();
        let worst = visits
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let fit = c * base.powi(k as i32 + 1);
                (v / fit).max(fit / v)
            })
            .fold(0.0, f64::max);
        pass &= worst <= 2.0;
        let plan = plan_depth(1e-3, 1.0, q, d).unwrap();
        lines.push(format!(
            "D={d}: visits {visits:?} vs {c:.3}*{base}^l, worst factor {worst:.2} (planner: depth {} for eps 1e-3)",
            plan.depth
        ));
    }
    Outcome { pass, detail: format!("q=3, {}", lines.join("; ")) }
}

/// Exact root marginal of a tree-shaped model by summing out subtrees
/// (children before parents); independent of the CD-tree code.
fn tree_sum_product(m: &Model, g: &Graph, root: Vertex) -> Vec<Rational> {
    let q = m.q();
    let mut parent = vec![usize::MAX; g.n()];
    let mut order = vec![root];
    parent[root] = root;
    let mut k = 0;
    while k < order.len() {
        let v = order[k];
        for &(u, _) in g.neighbors(v) {
            if parent[u] == usize::MAX {
                parent[u] = v;
                order.push(u);
            }
        }
        k += 1;
    }
    let pair = m.system.pair.as_ref().unwrap();
    let mut msg: Vec<Vec<Rational>> = vec![Vec::new(); g.n()];
    for &v in order.iter().rev() {
        let phi = m.system.potential(v);
        let mut w: Vec<Rational> = (0..q)
            .map(|s| match m.boundary.get(v) {
                Some(f) if f != s => int(0),
                _ => phi[s].clone(),
            })
            .collect();
        for &(u, _) in g.neighbors(v) {
            if u != parent[v] || v == root {
                if parent[u] != v {
                    continue;
                }
                for (s, ws) in w.iter_mut().enumerate() {
                    let sum: Rational = (0..q).map(|l| pair.get(s, l) * &msg[u][l]).sum();
                    *ws *= sum;
                }
            }
        }
        msg[v] = w;
    }
    let total: Rational = msg[root].iter().sum();
    msg[root].iter().map(|x| x / &total).collect()
}

/// Max-norm errors of truncations at `l = 2..=6` against the exact tree
/// marginal, and whether the full-depth result is exact.
fn truncation_errors(m: &Model, g: &Graph) -> (Vec<f64>, bool) {
    let exact = tree_sum_product(m, g, 0);
    let mut errors = Vec::new();
    let mut exact_at_full = false;
    for l in 2..=6 {
        let mut plan = plan_depth(0.5, 1.0, 3, 3).unwrap();
        plan.depth = l;
        let (p, _) = truncated_marginal::<Rational>(m, 0, &plan, &BoundaryInitialization::AllOnes).unwrap();
        errors.push(p.probs.iter().zip(&exact).map(|(a, b)| Scalar::to_f64(&(a - b)).abs()).fold(0.0, f64::max));
        exact_at_full = l == 6 && p.probs == exact;
    }
    (errors, exact_at_full)
}

fn show(errors: &[f64]) -> String {
    errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(", ")
}

/// Truncated marginals on a depth-6 tree with frozen leaves: errors never
/// grow and vanish at full depth.
fn truncation_convergence() -> Outcome {
    let (g, leaves) = common::regular_tree(3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b: Vec<(Vertex, Spin)> = leaves.iter().map(|&l| (l, rng.gen_range(0..3))).collect();
    let m = Model::graph(SpinSystem::coloring(3), g.clone(), BoundaryCondition::from_pairs(b.clone())).unwrap();
    let (errors, exact_at_full) = truncation_errors(&m, &g);
    let monotone = errors.windows(2).all(|w| w[1] <= w[0] + 1e-10);

    // Not gating: pinning interior vertices makes shallow truncations see
    // the boundary. q = 3 is below the tree uniqueness threshold for
    // branching 2, so these errors need not decrease.
    let interior: Vec<Vertex> = (4..g.n()).filter(|v| !leaves.contains(v)).collect();
    let pinned = loop {
        let mut extra = b.clone();
        extra.extend(interior.choose_multiple(&mut rng, 12).map(|&v| (v, rng.gen_range(0..3))));
        let m = Model::graph(SpinSystem::coloring(3), g.clone(), BoundaryCondition::from_pairs(extra)).unwrap();
        if find_consistent(&m).is_some() {
            break m;
        }
    };
    let (pinned_errors, pinned_exact) = truncation_errors(&pinned, &g);
    Outcome {
        pass: monotone && exact_at_full,
        detail: format!(
            "3-colorings, {} vertices, {} random frozen leaves; max-norm error at l=2..6: {} (all-ones leaves carry \
             no information until the frozen leaves are reached); exact at l=6: {exact_at_full}. \
             Supplementary, 12 interior pins: {} (exact at l=6: {pinned_exact})",
            m.n(),
            leaves.len(),
            show(&errors),
            show(&pinned_errors)
        ),
    }
}

fn random_pair_system(rng: &mut ChaCha8Rng, q: usize, p_zero: f64) -> SpinSystem {
    let pair = Matrix::new(q, (0..q * q).map(|_| common::weight(rng, p_zero)).collect()).unwrap();
    let phi = (0..q).map(|_| common::weight(rng, p_zero / 2.0)).collect();
    SpinSystem::pairwise(pair, phi)
}

/// Exact alignment certificates and refutations.
fn alignability() -> Outcome {
    let mut problems = Vec::new();
    for q in 2..=6 {
        let sys = SpinSystem::coloring(q);
        match check_positively_alignable(&sys) {
            Ok(Some(c)) if c.verify(&sys) && c.c1 == ratio(q as i64 - 1, q as i64) => {}
            other => problems.push(format!("coloring q={q}: {other:?}")),
        }
    }
    let zero_row = SpinSystem::pairwise(
        Matrix::new(3, vec![int(1), int(2), int(1), int(0), int(0), int(0), int(3), int(1), int(1)]).unwrap(),
        vec![int(1); 3],
    );
    if !matches!(check_positively_alignable(&zero_row), Ok(None)) {
        problems.push("zero-row interaction certified".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut plain_alignable = 0;
    for _ in 0..200 {
        let q = rng.gen_range(2..=5);
        let sys = random_pair_system(&mut rng, q, 0.3);
        if matches!(check_positively_alignable(&sys), Ok(Some(_))) {
            plain_alignable += 1;
        }
        let c = Permissive { c2: common::weight(&mut rng, 0.0), c3: common::weight(&mut rng, 0.0) };
        let aug = augment_permissive(&sys, &c).unwrap();
        match check_positively_alignable(&aug) {
            Ok(Some(cert)) if cert.verify(&aug) => {}
            other => problems.push(format!("augmented system not certified: {other:?}")),
        }
    }
    Outcome {
        pass: problems.is_empty(),
        detail: format!(
            "colorings q=2..6 certified (a uniform, c1=(q-1)/q); zero-row refuted; 200 random systems \
             ({plain_alignable} alignable as given) all certified after adding a permissive spin{}",
            first(&problems)
        ),
    }
}

/// All-ones truncated evaluation equals the degree-padded extension with
/// leaves drawn from φ·a.
fn boundary_extension() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut compared, mut both_undefined, mut problems) = (0, 0, Vec::new());
    while compared + both_undefined < 150 {
        let q = *[2, 3, 4].choose(&mut rng).unwrap();
        let sys = match rng.gen_range(0..3) {
            0 => SpinSystem::coloring(q),
            1 => augment_permissive(&random_pair_system(&mut rng, q - 1, 0.3), &Permissive::default()).unwrap(),
            _ => {
                let sys = random_pair_system(&mut rng, q, 0.2);
                if !matches!(check_positively_alignable(&sys), Ok(Some(_))) {
                    continue;
                }
                sys
            }
        };
        let cert = check_positively_alignable(&sys).unwrap().unwrap();
        let n = rng.gen_range(3..=8);
        let extra = rng.gen_range(0..=n);
        let g = common::connected_graph(&mut rng, n, 4, extra);
        let v = rng.gen_range(0..n);
        let b = common::boundary(&mut rng, n, sys.q, v, n / 3);
        let m = Model::graph(sys, g, b).unwrap();
        let r = rng.gen_range(0..m.q());
        let tree = build_cd_tree(&m, v, r, Some(rng.gen_range(1..=4))).unwrap();
        let plain = eval_ratios::<Rational>(&m, &tree, &BoundaryInitialization::AllOnes);
        let padded = extension_ratios(&m, &tree, 4, &cert);
        match (plain, padded) {
            (Ok(a), Ok(b)) if a == b => compared += 1,
            (Err(ComputeError::ZeroDenominator { .. }), Err(ComputeError::ZeroDenominator { .. })) => both_undefined += 1,
            (a, b) => problems.push(format!("{a:?} vs {b:?}")),
        }
    }
    Outcome {
        pass: problems.is_empty() && compared >= 100,
        detail: format!(
            "{compared} instances equal, {both_undefined} undefined in both (zero reference weight), degree padded to 4{}",
            first(&problems)
        ),
    }
}

/// 5-colorings on the truncated 3-regular tree: decaying SSM profile, and
/// the coupling-line maximum never below it.
fn mixing_profiles() -> Outcome {
    let budget = 300;
    let (mut ssm, mut vssm, mut twin) = (Vec::new(), Vec::new(), Vec::new());
    for d in 1..=4 {
        let (g, _) = common::regular_tree(3, d);
        let m = Model::graph(SpinSystem::coloring(5), g, BoundaryCondition::new()).unwrap();
        ssm.push(measure_ssm(&m, 0, &LambdaShape::Sphere, d, budget, 8, Engine::CdTree).unwrap());
        for (out, with_twin) in [(&mut vssm, false), (&mut twin, true)] {
            let opts = VssmOptions { line_budget: 10, max_lines: 3, twin: with_twin };
            out.push(measure_vssm(&m, 0, d, budget, 8, &opts).unwrap());
        }
    }
    let profile = MixingProfile::from_points(ssm.clone(), budget);
    let fit = fit_decay_rate(&profile);
    let deltas = &profile.deltas;
    let decaying = deltas.iter().all(|&x| x > 0.0) && deltas.windows(2).all(|w| w[1] <= w[0]);
    let dominated = ssm.iter().zip(&vssm).zip(&twin).all(|((s, v), t)| v.delta >= s.delta && t.delta >= s.delta);
    let kappa_ok = matches!(fit, Ok(f) if f.kappa > 0.0);
    let fmt = |pts: &[cdtree_core::mixing::MixingPoint]| pts.iter().map(|p| format!("{:.4}", p.delta)).collect::<Vec<_>>().join(", ");
    Outcome {
        pass: decaying && dominated && kappa_ok,
        detail: format!(
            "d=1..4 SSM [{}], VSSM [{}], VSSM with twins [{}]; fitted kappa {} (budget {budget}, exhaustive at d=1 only)",
            fmt(&ssm),
            fmt(&vssm),
            fmt(&twin),
            match fit {
                Ok(f) => format!("{:.3}, R^2 {:.3}", f.kappa, f.r_squared.unwrap_or(f64::NAN)),
                Err(e) => e.to_string(),
            }
        ),
    }
}

/// Telescoping products reproduce the enumerated partition function.
fn telescoping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = OracleConfig::default();
    let (mut compared, mut zeros, mut breakdowns, mut problems) = (0, 0, 0, Vec::new());
    let engines = [Engine::CdTree, Engine::Split, Engine::Exact];
    let mut k = 0;
    while compared < 240 {
        k += 1;
        let (m, engine) = if k % 4 == 3 {
            (common::hypergraph_instance(&mut rng, 6, &[2, 3]).model, Engine::Split)
        } else {
            (common::graph_instance(&mut rng, 6, &[2, 3, 5]).model, engines[k % 3])
        };
        let want: Rational = partition_function(&m, &cfg).unwrap();
        match partition_telescoping::<Rational>(&m, engine, &cfg) {
            Ok(t) if t.z == want => compared += 1,
            Ok(t) => problems.push(format!("{engine}: {} vs {}", t.z, want)),
            // The recursion has no usable reference spin at any remaining
            // vertex; not a wrong answer.
            Err(ComputeError::NoFeasibleReference) => breakdowns += 1,
            Err(e) => problems.push(format!("{engine}: {e}")),
        }
        zeros += usize::from(want == int(0));
    }
    Outcome {
        pass: problems.is_empty(),
        detail: format!(
            "{compared} instances equal (graphs via cdtree/split/exact, hypergraphs via split), {zeros} with Z = 0, \
             {breakdowns} recursion breakdowns without a feasible reference{}",
            first(&problems)
        ),
    }
}

fn first(problems: &[String]) -> String {
    match problems.first() {
        Some(p) => format!("; {} problems, first: {p}", problems.len()),
        None => String::new(),
    }
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("graph engines equal enumeration", graph_equivalence),
        ("hypergraph recursion equals enumeration", hypergraph_equivalence),
        ("worked coloring example", worked_example),
        ("naive evaluation cost", cost_model),
        ("truncation convergence", truncation_convergence),
        ("alignability certificates", alignability),
        ("padded boundary extension", boundary_extension),
        ("mixing profiles", mixing_profiles),
        ("telescoping partition function", telescoping),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        if !out.pass {
            failed += 1;
        }
        println!("{verdict} [{}] {name}: {} ({:.1}s)", i + 1, out.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
