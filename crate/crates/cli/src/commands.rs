use std::path::Path;
use std::time::Instant;

use cdtree_core::eval::{cdtree_marginal, BoundaryInitialization, Strategy};
use cdtree_core::mixing::{
    augment_permissive, check_positively_alignable, fit_decay_rate, measure_ssm, measure_vssm, LambdaShape, MixingPoint,
    MixingProfile, Permissive, VssmOptions,
};
use cdtree_core::model::{load_model, parse_spin, Spin};
use cdtree_core::num::parse_rational;
use cdtree_core::oracle::{gibbs_marginal, partition_function, OracleConfig, DEFAULT_MAX_ENUM_BITS};
use cdtree_core::partition::{find_consistent, partition_telescoping};
use cdtree_core::recursion::{hyper_marginal_with, split_marginal, RecursionOptions};
use cdtree_core::{
    build_cd_tree, BoundaryCondition, ComputeError, Engine, Graph, LogWeight, MarginalDistribution, Model, Rational,
    Scalar,
};
use serde_json::{json, Value};

use crate::args::{
    AlignArgs, Cli, Command, Emit, ExactArgs, MarginalArgs, MixingArgs, Mode, PartitionArgs, RecursionArgs, TreeArgs,
};
use crate::report::{CliError, Output, RunReport};

pub const ENUM_BITS_VAR: &str = "CDTREE_MAX_ENUM_BITS";

/// Everything a command computes besides the envelope.
struct Done {
    engine: Option<String>,
    mode: Option<Mode>,
    nodes: Value,
    payload: Value,
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<Output, CliError> {
    let start = Instant::now();
    let cfg = oracle_config(cli.max_enum_bits)?;
    let done = match &cli.command {
        Command::Exact(a) => exact(a, &cfg)?,
        Command::Marginal(a) => marginal(a, Engine::CdTree)?,
        Command::Recursion(a) => recursion(a)?,
        Command::Partition(a) => partition(a, &cfg)?,
        Command::Tree(a) => return tree(a).map(Output::Text),
        Command::MixingScan(a) => match mixing_scan(a)? {
            (profile, _) if a.emit == Emit::Csv => return Ok(Output::Text(profile.to_csv())),
            (_, done) => done,
        },
        Command::AlignCheck(a) => align_check(a)?,
    };
    if let Some(csv) = csv_payload(&cli.command, &done.payload) {
        return Ok(Output::Text(csv));
    }
    Ok(Output::Report(RunReport {
        command: argv.to_vec(),
        engine: done.engine,
        mode: done.mode.map(Mode::name),
        wall_time: start.elapsed(),
        nodes: done.nodes,
        payload: done.payload,
    }))
}

/// The flag wins over the environment, which wins over the default.
fn oracle_config(flag: Option<u32>) -> Result<OracleConfig, CliError> {
    let max_bits = match (flag, std::env::var(ENUM_BITS_VAR)) {
        (Some(bits), _) => bits,
        (None, Ok(text)) => text
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{ENUM_BITS_VAR} must be a non-negative integer, got {text:?}")))?,
        (None, Err(_)) => DEFAULT_MAX_ENUM_BITS,
    };
    Ok(OracleConfig { max_bits })
}

fn load(path: &Path) -> Result<Model, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Model(format!("{}: {e}", path.display())))?;
    load_model(&text).map_err(|e| CliError::Model(format!("{}: {e}", path.display())))
}

fn render(x: &Value) -> String {
    match x {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `spin,probability` rows for the marginal-producing commands.
fn csv_payload(cmd: &Command, payload: &Value) -> Option<String> {
    let emit = match cmd {
        Command::Exact(a) => a.emit,
        Command::Marginal(a) => a.emit,
        Command::Recursion(a) => a.marginal.emit,
        _ => return None,
    };
    if emit != Emit::Csv {
        return None;
    }
    let mut out = String::from("spin,probability\n");
    for (s, p) in payload["marginal"].as_array()?.iter().enumerate() {
        out.push_str(&format!("{s},{}\n", render(p)));
    }
    Some(out)
}

fn marginal_json<S: Scalar>(m: &MarginalDistribution<S>) -> Value {
    m.to_json()
}

/// A recursive engine cannot see conflicts between frozen vertices or away
/// from the query, so an empty Gibbs measure is ruled out separately.
fn guard_feasible<T>(model: &Model, out: Result<T, ComputeError>) -> Result<T, ComputeError> {
    match out {
        Ok(_) | Err(ComputeError::NoFeasibleReference) if find_consistent(model).is_none() => {
            Err(ComputeError::ZeroPartitionFunction)
        }
        other => other,
    }
}

fn exact(a: &ExactArgs, cfg: &OracleConfig) -> Result<Done, CliError> {
    let model = load(&a.model)?;
    fn go<S: Scalar>(model: &Model, v: usize, cfg: &OracleConfig) -> Result<Value, ComputeError> {
        let p = gibbs_marginal::<S>(model, v, cfg)?;
        let z = partition_function::<S>(model, cfg)?;
        Ok(json!({ "vertex": v, "marginal": marginal_json(&p), "Z": z.to_json() }))
    }
    let payload = match a.mode {
        Mode::Rational => go::<Rational>(&model, a.vertex, cfg)?,
        Mode::Float => go::<LogWeight>(&model, a.vertex, cfg)?,
    };
    Ok(Done { engine: Some(Engine::Exact.to_string()), mode: Some(a.mode), nodes: Value::Null, payload })
}

fn parse_init(text: &str, model: &Model) -> Result<BoundaryInitialization, CliError> {
    if text == "ones" {
        return Ok(BoundaryInitialization::AllOnes);
    }
    if let Some(k) = text.strip_prefix("spin:") {
        let val = match k.parse::<u64>() {
            Ok(i) => json!(i),
            Err(_) => json!(k),
        };
        return parse_spin(&model.system, &val).map(BoundaryInitialization::FixedSpin).map_err(|e| CliError::Usage(format!("--init: {e}")));
    }
    if let Some(file) = text.strip_prefix("dist:") {
        let body = std::fs::read_to_string(file).map_err(|e| CliError::Model(format!("{file}: {e}")))?;
        let items: Vec<Value> =
            serde_json::from_str(&body).map_err(|e| CliError::Model(format!("{file}: expected a JSON array: {e}")))?;
        let values = items
            .iter()
            .map(|x| parse_rational(&render(x)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Model(format!("{file}: {e}")))?;
        return Ok(BoundaryInitialization::Distribution(values));
    }
    Err(CliError::Usage(format!("--init: expected ones, dist:<file> or spin:<k>, got {text:?}")))
}

fn marginal(a: &MarginalArgs, engine: Engine) -> Result<Done, CliError> {
    let model = load(&a.model)?;
    let init = parse_init(&a.init, &model)?;
    fn go<S: Scalar>(model: &Model, a: &MarginalArgs, init: &BoundaryInitialization) -> Result<(Value, Value), ComputeError> {
        let out = cdtree_marginal::<S>(model, a.vertex, a.depth, a.reference, init, Strategy::Memoized);
        let (p, stats, r) = guard_feasible(model, out)?;
        let payload = json!({
            "vertex": a.vertex,
            "reference": r,
            "depth": a.depth,
            "truncated": a.depth.is_some(),
            "marginal": marginal_json(&p),
        });
        Ok((payload, json!({ "tree_nodes": stats.tree_nodes, "node_visits": stats.node_visits })))
    }
    let (payload, nodes) = match a.mode {
        Mode::Rational => go::<Rational>(&model, a, &init)?,
        Mode::Float => go::<LogWeight>(&model, a, &init)?,
    };
    Ok(Done { engine: Some(engine.to_string()), mode: Some(a.mode), nodes, payload })
}

fn recursion(a: &RecursionArgs) -> Result<Done, CliError> {
    let m = &a.marginal;
    if a.engine == Engine::CdTree {
        return marginal(m, Engine::CdTree);
    }
    if m.depth.is_some() || m.init != "ones" {
        return Err(CliError::Usage("--depth and --init apply to the cdtree engine only".into()));
    }
    let model = load(&m.model)?;
    fn go<S: Scalar>(model: &Model, m: &MarginalArgs) -> Result<(Value, Value), ComputeError> {
        let (p, stats, r) = if model.structure.as_graph().is_some() {
            let out = split_marginal::<S>(model, m.vertex, m.reference);
            guard_feasible(model, out).map(|(p, s, r)| (p, s, Some(r)))?
        } else {
            if m.reference.is_some() {
                return Err(ComputeError::InvalidArgument("the joint recursion on hypergraphs takes no reference spin".into()));
            }
            let out = hyper_marginal_with::<S>(model, m.vertex, RecursionOptions::default());
            guard_feasible(model, out).map(|(p, s)| (p, s, None))?
        };
        let payload = json!({ "vertex": m.vertex, "reference": r, "marginal": marginal_json(&p) });
        Ok((payload, json!({ "calls": stats.calls, "max_depth": stats.max_depth })))
    }
    let (payload, nodes) = match m.mode {
        Mode::Rational => go::<Rational>(&model, m)?,
        Mode::Float => go::<LogWeight>(&model, m)?,
    };
    Ok(Done { engine: Some(a.engine.to_string()), mode: Some(m.mode), nodes, payload })
}

fn partition(a: &PartitionArgs, cfg: &OracleConfig) -> Result<Done, CliError> {
    let model = load(&a.model)?;
    fn go<S: Scalar>(model: &Model, engine: Engine, cfg: &OracleConfig, log: bool) -> Result<(Value, usize), ComputeError> {
        let t = partition_telescoping::<S>(model, engine, cfg)?;
        let mut payload = json!({
            "Z": t.z.to_json(),
            "steps": t.steps.iter().map(|&(v, s)| json!([v, s])).collect::<Vec<_>>(),
        });
        if log {
            payload["log_Z"] = json!(t.z.to_f64().ln());
        }
        Ok((payload, t.steps.len()))
    }
    let (payload, steps) = match a.mode {
        Mode::Rational => go::<Rational>(&model, a.engine, cfg, false)?,
        Mode::Float => go::<LogWeight>(&model, a.engine, cfg, true)?,
    };
    Ok(Done { engine: Some(a.engine.to_string()), mode: Some(a.mode), nodes: json!({ "steps": steps }), payload })
}

fn tree(a: &TreeArgs) -> Result<String, CliError> {
    let model = load(&a.model)?;
    let reference = a.reference.unwrap_or(model.q() - 1);
    let t = build_cd_tree(&model, a.vertex, reference, a.depth)?;
    Ok(t.to_dot(&|s: Spin| model.system.spin_label(s)))
}

/// Complete tree: the root has `degree` children, every other internal
/// vertex `degree - 1`, and the leaves sit at distance `depth`.
fn regular_tree(degree: usize, depth: usize) -> Result<Graph, CliError> {
    let mut edges = Vec::new();
    let mut level = vec![0];
    let mut n = 1;
    for d in 0..depth {
        let fanout = if d == 0 { degree } else { degree - 1 };
        let mut next = Vec::new();
        for &parent in &level {
            for _ in 0..fanout {
                edges.push((parent, n));
                next.push(n);
                n += 1;
            }
        }
        level = next;
    }
    Ok(Graph::new(n, &edges)?)
}

fn mixing_scan(a: &MixingArgs) -> Result<(MixingProfile, Done), CliError> {
    let model = load(&a.model)?;
    if a.tree_degree.is_some_and(|b| b < 2) {
        return Err(CliError::Usage("--tree-degree must be at least 2".into()));
    }
    if a.tree_degree.is_some() && !model.system.is_spatially_invariant() {
        return Err(ComputeError::NotSpatiallyInvariant("per-edge or per-vertex weights cannot be placed on a new tree".into()).into());
    }
    let opts = VssmOptions { line_budget: a.lines, twin: a.twin, ..VssmOptions::default() };
    let mut points: Vec<MixingPoint> = Vec::new();
    for d in a.depths.clone() {
        let (m, v) = match a.tree_degree {
            Some(b) => (Model::graph(model.system.clone(), regular_tree(b, d)?, BoundaryCondition::new())?, 0),
            None => (model.clone(), a.vertex),
        };
        points.push(if a.lines == 0 {
            measure_ssm(&m, v, &LambdaShape::Sphere, d, a.budget, a.seed, Engine::CdTree)?
        } else {
            measure_vssm(&m, v, d, a.budget, a.seed, &opts)?
        });
    }
    let profile = MixingProfile::from_points(points, a.budget);
    let fit = fit_decay_rate(&profile).ok().map(|f| {
        json!({ "kappa": f.kappa, "intercept": f.intercept, "r_squared": f.r_squared, "points_used": f.points_used })
    });
    let payload = json!({
        "measure": if a.lines == 0 { "ssm" } else if a.twin { "vssm-twin" } else { "vssm" },
        "tree_degree": a.tree_degree,
        "seed": a.seed,
        "sample_budget": profile.sample_budget,
        "exhaustive": profile.exhaustive,
        "distances": profile.distances,
        "deltas": profile.deltas,
        "fitted_kappa": profile.fitted_kappa,
        "fit": fit,
        "points": profile.points.iter().map(|p| json!({
            "d": p.distance,
            "delta": p.delta,
            "exhaustive": p.exhaustive,
            "configs_tested": p.configs_tested,
            "pairs_tested": p.pairs_tested,
            "infeasible": p.infeasible,
            "lines_tested": p.lines_tested,
        })).collect::<Vec<_>>(),
    });
    let done = Done { engine: Some(Engine::CdTree.to_string()), mode: Some(Mode::Rational), nodes: Value::Null, payload };
    Ok((profile, done))
}

fn align_check(a: &AlignArgs) -> Result<Done, CliError> {
    let model = load(&a.model)?;
    let sys = if a.permissive { augment_permissive(&model.system, &Permissive::default())? } else { model.system.clone() };
    let payload = match check_positively_alignable(&sys)? {
        Some(cert) => cert.to_json(),
        None => json!({ "alignable": false }),
    };
    Ok(Done { engine: None, mode: Some(Mode::Rational), nodes: Value::Null, payload })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regular_tree_sizes() {
        let g = regular_tree(3, 3).unwrap();
        assert_eq!(g.n(), 1 + 3 + 6 + 12);
        assert_eq!(g.degree(0), 3);
        assert_eq!(g.max_degree(), 3);
        assert_eq!(regular_tree(4, 0).unwrap().n(), 1);
    }

    #[test]
    fn enum_bits_flag_wins() {
        assert_eq!(oracle_config(Some(7)).unwrap().max_bits, 7);
    }
}
