//! Line-oriented experiment configuration: `[section]` headers with
//! `key=value` pairs, `#` comments, UTF-8. Parsing resolves every default,
//! so serialising a parsed config and reparsing it yields an equal value.

use nplab_core::nn::Activation;
use nplab_core::optimize::LrSchedule;
use nplab_core::pinn::SampleCounts;
use std::fmt;

#[derive(Debug)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Pinn,
    PinnRk,
    PinnIdent,
    FeynmanKac,
    DeepBsde,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pinn" => Some(Method::Pinn),
            "pinn-rk" => Some(Method::PinnRk),
            "pinn-ident" => Some(Method::PinnIdent),
            "feynman-kac" => Some(Method::FeynmanKac),
            "deep-bsde" => Some(Method::DeepBsde),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Pinn => "pinn",
            Method::PinnRk => "pinn-rk",
            Method::PinnIdent => "pinn-ident",
            Method::FeynmanKac => "feynman-kac",
            Method::DeepBsde => "deep-bsde",
        }
    }

    fn compatible_problems(self) -> &'static [&'static str] {
        match self {
            Method::Pinn => &["burgers", "eikonal"],
            Method::PinnRk => &["burgers"],
            Method::PinnIdent => &["eikonal-param"],
            Method::FeynmanKac => &["heat", "heat-potential"],
            Method::DeepBsde => &["lqg-hjb", "allen-cahn"],
        }
    }
}

/// Resolved network settings.
#[derive(Debug, Clone, PartialEq)]
pub enum NetSettings {
    /// Perceptron for the PINN and regression methods.
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
        batch_norm: bool,
        bias: bool,
        input_scaling: bool,
    },
    /// Per-step gradient networks of the BSDE solver.
    Bsde { stacks: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RkSettings {
    pub stages: usize,
    pub dt: f64,
    pub points: usize,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub problem: String,
    pub dim: usize,
    pub net: NetSettings,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub eval_interval: usize,
    pub eval_points: usize,
    pub stop_below: Option<f64>,
    pub noise: f64,
    pub counts: SampleCounts,
    pub lambda_init: f64,
    /// Time steps of the BSDE rollout.
    pub steps: usize,
    pub rk: RkSettings,
    pub theta0: (f64, f64),
    pub out_path: String,
}

const SECTIONS: &[&str] = &["method", "problem", "network", "training", "output"];

struct RawEntry {
    line: usize,
    section: &'static str,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<RawEntry>, ParseError> {
    let mut entries = Vec::new();
    let mut section: Option<&'static str> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            match SECTIONS.iter().find(|s| **s == name) {
                Some(s) => section = Some(s),
                None => return Err(err(line_no, format!("unknown section [{name}]"))),
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(line_no, format!("expected key=value, got {line:?}")));
        };
        let Some(section) = section else {
            return Err(err(line_no, "key before any [section] header"));
        };
        entries.push(RawEntry {
            line: line_no,
            section,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

struct Lookup {
    entries: Vec<RawEntry>,
    used: Vec<bool>,
}

impl Lookup {
    fn get(&mut self, section: &str, key: &str) -> Option<(usize, String)> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.section == section && e.key == key {
                self.used[i] = true;
                return Some((e.line, e.value.clone()));
            }
        }
        None
    }

    fn reject_unused(&self) -> Result<(), ParseError> {
        for (i, e) in self.entries.iter().enumerate() {
            if !self.used[i] {
                return Err(err(
                    e.line,
                    format!("unknown key {:?} in section [{}]", e.key, e.section),
                ));
            }
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ParseError> {
    v.parse()
        .map_err(|_| err(line, format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ParseError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_activation(line: usize, v: &str) -> Result<Activation, ParseError> {
    match v {
        "tanh" => Ok(Activation::Tanh),
        "relu" => Ok(Activation::Relu),
        other => match other.strip_prefix("leaky_relu:") {
            Some(s) => Ok(Activation::LeakyRelu(parse_num(line, "activation", s)?)),
            None => Err(err(line, format!("unknown activation {v:?}"))),
        },
    }
}

fn format_activation(a: Activation) -> String {
    match a {
        Activation::Tanh => "tanh".to_string(),
        Activation::Relu => "relu".to_string(),
        Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
    }
}

fn parse_schedule(line: usize, v: &str) -> Result<LrSchedule, ParseError> {
    let bad = |m: String| err(line, format!("schedule: {m}"));
    let sched = if let Some(rest) = v.strip_prefix("constant:") {
        LrSchedule::Constant(parse_num(line, "schedule", rest)?)
    } else if let Some(rest) = v.strip_prefix("exp:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err(bad("exp takes base,scale".into()));
        }
        LrSchedule::Exponential {
            base: parse_num(line, "schedule", parts[0])?,
            scale: parse_num(line, "schedule", parts[1])?,
        }
    } else if let Some(rest) = v.strip_prefix("piecewise:") {
        let Some((bs, vs)) = rest.split_once(';') else {
            return Err(bad("piecewise takes boundaries;values".into()));
        };
        let boundaries = if bs.is_empty() {
            Vec::new()
        } else {
            bs.split(',')
                .map(|b| parse_num(line, "schedule", b))
                .collect::<Result<_, _>>()?
        };
        let values = vs
            .split(',')
            .map(|x| parse_num(line, "schedule", x))
            .collect::<Result<_, _>>()?;
        LrSchedule::Piecewise { boundaries, values }
    } else {
        return Err(bad(format!("unknown form {v:?}")));
    };
    sched
        .validate()
        .map_err(|e| err(line, format!("schedule: {e}")))?;
    Ok(sched)
}

fn format_schedule(s: &LrSchedule) -> String {
    match s {
        LrSchedule::Constant(r) => format!("constant:{r}"),
        LrSchedule::Exponential { base, scale } => format!("exp:{base},{scale}"),
        LrSchedule::Piecewise { boundaries, values } => {
            let bs: Vec<String> = boundaries.iter().map(|b| b.to_string()).collect();
            let vs: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            format!("piecewise:{};{}", bs.join(","), vs.join(","))
        }
    }
}

/// Per-problem defaults: dimension, network, schedule, batch, sampling
/// counts and BSDE steps.
struct Defaults {
    dim: usize,
    net: NetSettings,
    schedule: LrSchedule,
    batch: usize,
    counts: SampleCounts,
    steps: usize,
    theta0: (f64, f64),
}

fn defaults_for(method: Method, problem: &str, dim_override: Option<usize>) -> Defaults {
    let mlp = |hidden: Vec<usize>, act: Activation, scaling: bool| NetSettings::Mlp {
        hidden,
        activation: act,
        batch_norm: false,
        bias: true,
        input_scaling: scaling,
    };
    match (method, problem) {
        (Method::Pinn, "burgers") => Defaults {
            dim: 1,
            net: mlp(vec![20; 8], Activation::Tanh, true),
            schedule: LrSchedule::piecewise(vec![1000, 3000], vec![0.01, 0.001, 0.0005]),
            batch: 64,
            counts: SampleCounts::new(10_000, 50, 50, 0),
            steps: 1,
            theta0: (0.0, 1.0),
        },
        (Method::Pinn, _) => Defaults {
            dim: 1,
            net: mlp(vec![20; 2], Activation::LeakyRelu(0.1), false),
            schedule: LrSchedule::piecewise(vec![3000, 7000], vec![0.1, 0.01, 0.001]),
            batch: 64,
            counts: SampleCounts::new(2000, 25, 50, 0),
            steps: 1,
            theta0: (0.0, 1.0),
        },
        (Method::PinnIdent, _) => Defaults {
            dim: 1,
            net: mlp(vec![20], Activation::LeakyRelu(0.1), false),
            schedule: LrSchedule::piecewise(vec![3000, 7000], vec![0.1, 0.01, 0.001]),
            batch: 64,
            counts: SampleCounts::new(2000, 25, 50, 500),
            steps: 1,
            theta0: (0.0, 1.0),
        },
        (Method::PinnRk, _) => Defaults {
            dim: 1,
            net: mlp(vec![20; 3], Activation::Tanh, false),
            schedule: LrSchedule::Constant(0.01),
            batch: 64,
            counts: SampleCounts::new(64, 0, 0, 0),
            steps: 1,
            theta0: (0.0, 1.0),
        },
        (Method::FeynmanKac, _) => Defaults {
            dim: dim_override.unwrap_or(100),
            net: NetSettings::Mlp {
                hidden: vec![200, 200],
                activation: Activation::Tanh,
                batch_norm: true,
                bias: false,
                input_scaling: false,
            },
            schedule: LrSchedule::piecewise(
                vec![250_000, 500_000],
                vec![1e-3, 1e-4, 1e-5],
            ),
            batch: 256,
            counts: SampleCounts::new(0, 0, 0, 0),
            steps: 1,
            theta0: (0.0, 1.0),
        },
        (Method::DeepBsde, problem) => Defaults {
            dim: dim_override.unwrap_or(100),
            net: NetSettings::Bsde {
                stacks: 2,
                width: 110,
            },
            schedule: if problem == "allen-cahn" {
                LrSchedule::Constant(5e-4)
            } else {
                LrSchedule::Constant(0.01)
            },
            batch: 64,
            counts: SampleCounts::new(0, 0, 0, 0),
            steps: 20,
            theta0: if problem == "allen-cahn" { (0.0, 0.2) } else { (0.0, 1.0) },
        },
    }
}

/// Parse and fully validate a configuration, applying the documented
/// defaults. Unknown keys, malformed values and incompatible
/// method/problem pairs are reported with their line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ParseError> {
    let entries = tokenize(text)?;
    let used = vec![false; entries.len()];
    let mut lk = Lookup { entries, used };

    let (mline, mname) = lk
        .get("method", "name")
        .ok_or_else(|| err(0, "missing [method] name"))?;
    let method =
        Method::parse(&mname).ok_or_else(|| err(mline, format!("unknown method {mname:?}")))?;

    let (pline, problem) = lk
        .get("problem", "name")
        .ok_or_else(|| err(0, "missing [problem] name"))?;
    if !method.compatible_problems().contains(&problem.as_str()) {
        return Err(err(
            pline,
            format!(
                "problem {problem:?} is not compatible with method {} (expected one of {:?})",
                method.name(),
                method.compatible_problems()
            ),
        ));
    }

    let dim_override = match lk.get("problem", "dim") {
        Some((l, v)) => Some(parse_num::<usize>(l, "dim", &v)?),
        None => None,
    };
    if let Some(d) = dim_override {
        if d == 0 {
            return Err(err(0, "dim must be positive"));
        }
        if matches!(method, Method::Pinn | Method::PinnRk | Method::PinnIdent) && d != 1 {
            return Err(err(0, "the registered collocation problems are 1-d"));
        }
    }

    let defaults = defaults_for(method, &problem, dim_override);
    let dim = defaults.dim;

    // network
    let mut net = defaults.net;
    let mut preset_steps = None;
    if let Some((l, preset)) = lk.get("network", "preset") {
        net = match (method, preset.as_str()) {
            (Method::DeepBsde, p) => {
                let preset = nplab_core::deep_bsde::BsdePreset::parse(p)
                    .map_err(|e| err(l, e.to_string()))?;
                let (stacks, width) = preset.arch();
                preset_steps = Some(preset.steps());
                NetSettings::Bsde { stacks, width }
            }
            (_, "burgers") => defaults_for(Method::Pinn, "burgers", None).net,
            (_, "eikonal") => defaults_for(Method::Pinn, "eikonal", None).net,
            (_, "heat200") => defaults_for(Method::FeynmanKac, "heat", Some(dim)).net,
            (_, other) => return Err(err(l, format!("unknown preset {other:?}"))),
        };
    }
    match &mut net {
        NetSettings::Mlp {
            hidden,
            activation,
            batch_norm,
            bias,
            input_scaling,
        } => {
            if let Some((l, v)) = lk.get("network", "hidden") {
                *hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|h| parse_num(l, "hidden", h))
                        .collect::<Result<_, _>>()?
                };
            }
            if let Some((l, v)) = lk.get("network", "activation") {
                *activation = parse_activation(l, &v)?;
            }
            if let Some((l, v)) = lk.get("network", "batch_norm") {
                *batch_norm = parse_bool(l, "batch_norm", &v)?;
            }
            if let Some((l, v)) = lk.get("network", "bias") {
                *bias = parse_bool(l, "bias", &v)?;
            }
            if let Some((l, v)) = lk.get("network", "input_scaling") {
                *input_scaling = parse_bool(l, "input_scaling", &v)?;
            }
        }
        NetSettings::Bsde { stacks, width } => {
            if let Some((l, v)) = lk.get("network", "stacks") {
                *stacks = parse_num(l, "stacks", &v)?;
            }
            if let Some((l, v)) = lk.get("network", "width") {
                *width = parse_num(l, "width", &v)?;
            }
        }
    }

    // training
    let (eline, ev) = lk
        .get("training", "epochs")
        .ok_or_else(|| err(0, "missing [training] epochs"))?;
    let epochs: usize = parse_num(eline, "epochs", &ev)?;
    let (sline, sv) = lk
        .get("training", "seed")
        .ok_or_else(|| err(0, "missing [training] seed"))?;
    let seed: u64 = parse_num(sline, "seed", &sv)?;

    let mut batch = defaults.batch;
    if let Some((l, v)) = lk.get("training", "batch") {
        batch = parse_num(l, "batch", &v)?;
        if batch == 0 {
            return Err(err(l, "batch must be positive"));
        }
    }
    let mut schedule = defaults.schedule;
    if let Some((l, v)) = lk.get("training", "schedule") {
        schedule = parse_schedule(l, &v)?;
    }
    let mut eval_interval = 0usize;
    if let Some((l, v)) = lk.get("training", "eval_interval") {
        eval_interval = parse_num(l, "eval_interval", &v)?;
    }
    let mut eval_points = 4096usize;
    if let Some((l, v)) = lk.get("training", "eval_points") {
        eval_points = parse_num(l, "eval_points", &v)?;
        if eval_points == 0 {
            return Err(err(l, "eval_points must be positive"));
        }
    }
    let stop_below = match lk.get("training", "stop_below") {
        Some((l, v)) => {
            let t: f64 = parse_num(l, "stop_below", &v)?;
            if t <= 0.0 {
                return Err(err(l, "stop_below must be positive"));
            }
            Some(t)
        }
        None => None,
    };
    let mut noise = 0.0f64;
    if let Some((l, v)) = lk.get("training", "noise") {
        noise = parse_num(l, "noise", &v)?;
        if noise < 0.0 {
            return Err(err(l, "noise must be nonnegative"));
        }
    }
    let mut counts = defaults.counts;
    if let Some((l, v)) = lk.get("training", "interior") {
        counts.interior = parse_num(l, "interior", &v)?;
    }
    if let Some((l, v)) = lk.get("training", "initial") {
        counts.initial = parse_num(l, "initial", &v)?;
    }
    if let Some((l, v)) = lk.get("training", "boundary") {
        counts.boundary = parse_num(l, "boundary", &v)?;
    }
    if let Some((l, v)) = lk.get("training", "data") {
        counts.data = parse_num(l, "data", &v)?;
    }
    let mut lambda_init = 1.0f64;
    if let Some((l, v)) = lk.get("training", "lambda_init") {
        lambda_init = parse_num(l, "lambda_init", &v)?;
    }
    let mut steps = preset_steps.unwrap_or(defaults.steps);
    if let Some((l, v)) = lk.get("training", "steps") {
        steps = parse_num(l, "steps", &v)?;
        if steps == 0 {
            return Err(err(l, "steps must be positive"));
        }
    }
    let mut rk = RkSettings {
        stages: 2,
        dt: 0.1,
        points: 64,
    };
    if let Some((l, v)) = lk.get("training", "rk_stages") {
        rk.stages = parse_num(l, "rk_stages", &v)?;
        if !(1..=3).contains(&rk.stages) {
            return Err(err(l, "rk_stages must be 1, 2 or 3"));
        }
    }
    if let Some((l, v)) = lk.get("training", "rk_dt") {
        rk.dt = parse_num(l, "rk_dt", &v)?;
        if rk.dt <= 0.0 {
            return Err(err(l, "rk_dt must be positive"));
        }
    }
    if let Some((l, v)) = lk.get("training", "rk_points") {
        rk.points = parse_num(l, "rk_points", &v)?;
        if rk.points == 0 {
            return Err(err(l, "rk_points must be positive"));
        }
    }
    let mut theta0 = defaults.theta0;
    if let Some((l, v)) = lk.get("training", "theta0_lo") {
        theta0.0 = parse_num(l, "theta0_lo", &v)?;
    }
    if let Some((l, v)) = lk.get("training", "theta0_hi") {
        theta0.1 = parse_num(l, "theta0_hi", &v)?;
    }

    let mut out_path = "run".to_string();
    if let Some((_, v)) = lk.get("output", "path") {
        out_path = v;
    }

    lk.reject_unused()?;

    Ok(ExperimentConfig {
        method,
        problem,
        dim,
        net,
        epochs,
        batch,
        seed,
        schedule,
        eval_interval,
        eval_points,
        stop_below,
        noise,
        counts,
        lambda_init,
        steps,
        rk,
        theta0,
        out_path,
    })
}

/// Canonical serialisation; parsing it reproduces the config exactly.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("[method]\nname={}\n\n", cfg.method.name()));
    s.push_str(&format!("[problem]\nname={}\ndim={}\n\n", cfg.problem, cfg.dim));
    s.push_str("[network]\n");
    match &cfg.net {
        NetSettings::Mlp {
            hidden,
            activation,
            batch_norm,
            bias,
            input_scaling,
        } => {
            let hs: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
            s.push_str(&format!("hidden={}\n", hs.join(",")));
            s.push_str(&format!("activation={}\n", format_activation(*activation)));
            s.push_str(&format!("batch_norm={batch_norm}\n"));
            s.push_str(&format!("bias={bias}\n"));
            s.push_str(&format!("input_scaling={input_scaling}\n"));
        }
        NetSettings::Bsde { stacks, width } => {
            s.push_str(&format!("stacks={stacks}\nwidth={width}\n"));
        }
    }
    s.push_str("\n[training]\n");
    s.push_str(&format!("epochs={}\n", cfg.epochs));
    s.push_str(&format!("seed={}\n", cfg.seed));
    s.push_str(&format!("batch={}\n", cfg.batch));
    s.push_str(&format!("schedule={}\n", format_schedule(&cfg.schedule)));
    s.push_str(&format!("eval_interval={}\n", cfg.eval_interval));
    s.push_str(&format!("eval_points={}\n", cfg.eval_points));
    if let Some(t) = cfg.stop_below {
        s.push_str(&format!("stop_below={t}\n"));
    }
    s.push_str(&format!("noise={}\n", cfg.noise));
    s.push_str(&format!("interior={}\n", cfg.counts.interior));
    s.push_str(&format!("initial={}\n", cfg.counts.initial));
    s.push_str(&format!("boundary={}\n", cfg.counts.boundary));
    s.push_str(&format!("data={}\n", cfg.counts.data));
    s.push_str(&format!("lambda_init={}\n", cfg.lambda_init));
    s.push_str(&format!("steps={}\n", cfg.steps));
    s.push_str(&format!("rk_stages={}\n", cfg.rk.stages));
    s.push_str(&format!("rk_dt={}\n", cfg.rk.dt));
    s.push_str(&format!("rk_points={}\n", cfg.rk.points));
    s.push_str(&format!("theta0_lo={}\n", cfg.theta0.0));
    s.push_str(&format!("theta0_hi={}\n", cfg.theta0.1));
    s.push_str(&format!("\n[output]\npath={}\n", cfg.out_path));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[method]
name=pinn
[problem]
name=eikonal
[training]
epochs=100
seed=7
";

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.method, Method::Pinn);
        assert_eq!(cfg.problem, "eikonal");
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.counts, SampleCounts::new(2000, 25, 50, 0));
        assert_eq!(
            cfg.schedule,
            LrSchedule::piecewise(vec![3000, 7000], vec![0.1, 0.01, 0.001])
        );
        match &cfg.net {
            NetSettings::Mlp { hidden, activation, .. } => {
                assert_eq!(hidden, &vec![20, 20]);
                assert_eq!(*activation, Activation::LeakyRelu(0.1));
            }
            _ => panic!("expected mlp settings"),
        }
        assert_eq!(cfg.out_path, "run");
    }

    #[test]
    fn roundtrip_is_identity() {
        let cfg = parse_config(MINIMAL).unwrap();
        let text = serialize_config(&cfg);
        let again = parse_config(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(serialize_config(&again), text);
    }

    #[test]
    fn negative_epochs_error_names_the_line() {
        let text = "[method]\nname=pinn\n[problem]\nname=burgers\n[training]\nepochs=-5\nseed=0\n";
        let e = parse_config(text).unwrap_err();
        assert_eq!(e.line, 6);
        assert!(e.message.contains("epochs"));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{MINIMAL}\n[training]\nbogus=1\n");
        let e = parse_config(&text).unwrap_err();
        assert!(e.message.contains("bogus"));
    }

    #[test]
    fn incompatible_method_problem_pair_errors() {
        let text = "[method]\nname=deep-bsde\n[problem]\nname=burgers\n[training]\nepochs=1\nseed=0\n";
        let e = parse_config(text).unwrap_err();
        assert_eq!(e.line, 4);
        assert!(e.message.contains("not compatible"));
    }

    #[test]
    fn bsde_presets_resolve() {
        for (preset, steps, arch) in [
            ("simple", 1, (0usize, 0usize)),
            ("reference", 20, (2, 110)),
            ("l3", 30, (3, 200)),
            ("l5", 50, (5, 300)),
        ] {
            let text = format!(
                "[method]\nname=deep-bsde\n[problem]\nname=lqg-hjb\n[network]\npreset={preset}\n[training]\nepochs=1\nseed=0\n"
            );
            let cfg = parse_config(&text).unwrap();
            assert_eq!(cfg.net, NetSettings::Bsde { stacks: arch.0, width: arch.1 });
            assert_eq!(cfg.steps, steps);
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "\
# experiment
[method]
name = feynman-kac   # regression
[problem]
name=heat
dim=10

[training]
epochs=10
seed=1
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.dim, 10);
        assert_eq!(cfg.batch, 256);
    }
}
