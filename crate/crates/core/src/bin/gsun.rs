use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use gsun::gsun::{krige, simulate, GsunTheta, LocationSet, SpatialSample, THETA_NAMES};
use gsun::neural::graph::GraphBatch;
use gsun::neural::network::estimate_batch;
use gsun::neural::train::train_from;
use gsun::neural::{read_weights, uncertainty, write_weights, EstimatorConfig, EstimatorWeights, DEFAULT_LEVELS};
use gsun::numcore::rng::RngStream;
use gsun::pit::{pit, simulate_model, Model};
use gsun::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gsun", version, about = "Simulation, kriging, PIT diagnostics and neural estimation for the GSUN spatial process")]
struct Cli {
    /// Worker threads (overrides GSUN_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print a single JSON result object on standard output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate replicates at random or given locations.
    Simulate(SimulateArgs),
    /// Conditional mean and variance at prediction locations.
    Krige(KrigeArgs),
    /// Marginal probability integral transform of one replicate.
    Pit(PitArgs),
    /// Train an estimator on simulated data.
    Train(TrainArgs),
    /// Point estimate of the parameters from a sample.
    Estimate(EstimateArgs),
    /// Bootstrap-then-simulate quantiles of the estimator.
    Uq(UqArgs),
    /// Write the radius graph of a sample as JSON.
    GraphExport(GraphArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Parameters sigma2,beta1,nu1,beta2,nu2,delta1,delta2.
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<String>,
    /// Simulate a comparison model instead (gaussian, tg, tgh, gsun).
    #[arg(long, requires = "params", conflicts_with = "theta")]
    model: Option<String>,
    /// Comma-separated parameters of --model.
    #[arg(long, allow_hyphen_values = true)]
    params: Option<String>,
    /// Number of uniformly drawn locations.
    #[arg(long, conflicts_with = "locs")]
    n: Option<usize>,
    /// CSV of locations with an x,y header.
    #[arg(long)]
    locs: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KrigeArgs {
    #[arg(long, allow_hyphen_values = true)]
    theta: String,
    /// Observed sample (one replicate).
    #[arg(long)]
    data: PathBuf,
    /// CSV of prediction locations with an x,y header.
    #[arg(long)]
    pred: PathBuf,
    /// Monte Carlo draws for the conditional moments.
    #[arg(long, default_value_t = 20_000)]
    draws: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PitArgs {
    /// Model whose cdf is applied (gaussian, tg, tgh, gsun).
    #[arg(long)]
    cdf_model: String,
    #[arg(long, allow_hyphen_values = true)]
    params: String,
    #[arg(long)]
    data: PathBuf,
    /// Label of the model that generated the data.
    #[arg(long, default_value = "data")]
    data_model: String,
    /// Report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// 20-bin histogram of the PIT values as CSV.
    #[arg(long)]
    hist: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Estimator config as JSON; overrides --profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Locations per simulated data set.
    #[arg(long, default_value_t = 30)]
    n: usize,
    /// Replicates per simulated data set.
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long)]
    iterations: Option<usize>,
    /// Continue from existing weights.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Graph radius; defaults to the one stored with the weights.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct UqArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Bootstrap resamples.
    #[arg(long, default_value_t = 100)]
    j: usize,
    /// Simulated data sets.
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    radius: Option<f64>,
    /// Comma-separated quantile levels.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.34)]
    radius: f64,
    /// Replicate whose values become node features.
    #[arg(long, default_value_t = 0)]
    rep: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error.to_string()))?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read_sample(path: &Path) -> Result<SpatialSample> {
    SpatialSample::read_csv(open(path)?)
}

fn read_locs(path: &Path) -> Result<LocationSet> {
    let mut rd = csv::Reader::from_reader(open(path)?);
    let header = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if header.len() < 2 || &header[0] != "x" || &header[1] != "y" {
        return Err(Error::Parse(format!("{}: location CSV must start with an x,y header", path.display())));
    }
    let mut pts = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let p = |k: usize| rec[k].trim().parse::<f64>().map_err(|e| Error::Parse(format!("{:?}: {e}", &rec[k])));
        pts.push([p(0)?, p(1)?]);
    }
    LocationSet::new(pts)
}

fn theta_json(t: &[f64; 7]) -> Value {
    let mut m = serde_json::Map::new();
    for (name, v) in THETA_NAMES.iter().zip(t) {
        m.insert(name.to_string(), json!(v));
    }
    Value::Object(m)
}

fn load_weights(path: &Path) -> Result<EstimatorWeights> {
    read_weights(open(path)?)
}

fn run_simulate(a: &SimulateArgs) -> Result<Value> {
    let locs = match (&a.locs, a.n) {
        (Some(p), _) => read_locs(p)?,
        (None, Some(n)) if n > 0 => LocationSet::random(n, &mut RngStream::new(a.seed).substream("locations", 0)),
        _ => return Err(Error::InvalidParameter("give --n (positive) or --locs".into())),
    };
    let mut rng = RngStream::new(a.seed).substream("simulate", 0);
    let (sample, label) = match (&a.theta, &a.model) {
        (Some(t), None) => (simulate(&t.parse::<GsunTheta>()?, &locs, a.reps, &mut rng)?, "gsun".to_string()),
        (None, Some(m)) => {
            let model = Model::parse(m, a.params.as_deref().unwrap_or_default())?;
            let mut cols = Vec::with_capacity(a.reps);
            for r in 0..a.reps {
                let s = simulate_model(&model, &locs, &mut rng.substream("replicate", r as u64))?;
                cols.extend(s.replicate(0).iter().copied());
            }
            let values = gsun::numcore::linalg::DenseMatrix::from_column_slice(locs.len(), a.reps, &cols);
            (SpatialSample::new(locs.clone(), values)?, model.label().to_string())
        }
        _ => return Err(Error::InvalidParameter("give exactly one of --theta or --model".into())),
    };
    write_atomic(&a.out, |w| sample.write_csv(w))?;
    Ok(json!({"command": "simulate", "model": label, "n": sample.locs.len(), "reps": sample.replicates(), "out": a.out}))
}

fn run_krige(a: &KrigeArgs) -> Result<Value> {
    let theta: GsunTheta = a.theta.parse()?;
    let obs = read_sample(&a.data)?;
    let pred = read_locs(&a.pred)?;
    let k = krige(&theta, &obs, &pred, a.draws, &mut RngStream::new(a.seed).substream("krige", 0))?;
    write_atomic(&a.out, |w| {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Io(e.to_string());
        wr.write_record(["x", "y", "mean", "var", "mean_se"]).map_err(err)?;
        for (i, p) in pred.points().iter().enumerate() {
            let row = [p[0], p[1], k.mean[i], k.var[i], k.mean_se[i]].map(gsun::gsun::fmt17);
            wr.write_record(&row).map_err(err)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    Ok(json!({"command": "krige", "predictions": pred.len(), "mean": k.mean.as_slice(), "var": k.var.as_slice(), "out": a.out}))
}

fn run_pit(a: &PitArgs) -> Result<Value> {
    let model = Model::parse(&a.cdf_model, &a.params)?;
    let sample = read_sample(&a.data)?;
    let report = pit(&model, &sample, &a.data_model)?;
    if let Some(p) = &a.out {
        write_atomic(p, |w| Ok(serde_json::to_writer_pretty(w, &report)?))?;
    }
    if let Some(p) = &a.hist {
        write_atomic(p, |w| Ok(w.write_all(report.histogram_csv().as_bytes())?))?;
    }
    let mut v = serde_json::to_value(&report)?;
    v["command"] = json!("pit");
    Ok(v)
}

fn run_train(a: &TrainArgs) -> Result<Value> {
    let root = RngStream::new(a.seed);
    let w = match &a.init {
        Some(p) => load_weights(p)?,
        None => {
            let cfg = match &a.config {
                Some(p) => serde_json::from_reader::<_, EstimatorConfig>(open(p)?)?,
                None => match a.profile {
                    Profile::Desk => EstimatorConfig::desk(),
                    Profile::Paper => EstimatorConfig::paper(),
                },
            };
            EstimatorWeights::init(&cfg, &mut root.substream("init", 0))?
        }
    };
    let mut w = w;
    if let Some(it) = a.iterations {
        w.config.max_iterations = it;
    }
    let (w, log) = train_from(w, a.n, a.reps, &mut root.clone(), |_| {})?;
    write_atomic(&a.out, |out| write_weights(&w, out))?;
    if let Some(p) = &a.log {
        write_atomic(p, |out| log.write_csv(out))?;
    }
    let last = log.records.last().map(|r| r.loss);
    Ok(json!({
        "command": "train",
        "iterations": log.records.len(),
        "stopped_early": log.stopped_early,
        "final_loss": last,
        "fingerprint": w.fingerprint(),
        "out": a.out,
    }))
}

fn run_estimate(a: &EstimateArgs) -> Result<Value> {
    let w = load_weights(&a.weights)?;
    let sample = read_sample(&a.data)?;
    let radius = a.radius.unwrap_or(w.config.radius);
    let batch = GraphBatch::from_sample(&sample, radius)?;
    let est = estimate_batch(&w, &batch)?.to_array();
    let v = json!({"command": "estimate", "theta": theta_json(&est), "theta_array": est, "n": sample.locs.len(), "reps": sample.replicates()});
    if let Some(p) = &a.out {
        write_atomic(p, |w| Ok(serde_json::to_writer_pretty(w, &v)?))?;
    }
    Ok(v)
}

fn parse_levels(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| Error::Parse(format!("level {p:?}: {e}")))).collect()
}

fn run_uq(a: &UqArgs) -> Result<Value> {
    let w = load_weights(&a.weights)?;
    let sample = read_sample(&a.data)?;
    let radius = a.radius.unwrap_or(w.config.radius);
    let levels = match &a.levels {
        Some(s) => parse_levels(s)?,
        None => DEFAULT_LEVELS.to_vec(),
    };
    let t = uncertainty(&w, &sample, a.j, a.k, radius, &levels, &mut RngStream::new(a.seed))?;
    let table: Vec<Value> = t.levels.iter().zip(&t.quantiles).map(|(l, q)| json!({"level": l, "theta": theta_json(q)})).collect();
    let v = json!({"command": "uq", "theta_bar": theta_json(&t.theta_bar), "quantiles": table, "monotone": t.is_monotone(), "j": a.j, "k": a.k});
    if let Some(p) = &a.out {
        write_atomic(p, |w| Ok(serde_json::to_writer_pretty(w, &v)?))?;
    }
    Ok(v)
}

fn run_graph(a: &GraphArgs) -> Result<Value> {
    let sample = read_sample(&a.data)?;
    if a.rep >= sample.replicates() {
        return Err(Error::IndexOutOfRange { index: a.rep, dim: sample.replicates() });
    }
    let g = gsun::neural::build_graph(&sample.locs, sample.replicate(a.rep).as_slice(), a.radius)?;
    let nodes: Vec<[f64; 3]> = (0..g.len()).map(|i| [g.features.get(i, 0), g.features.get(i, 1), g.features.get(i, 2)]).collect();
    let v = json!({"command": "graph-export", "radius": g.radius, "nodes": nodes, "edges": g.edges});
    write_atomic(&a.out, |w| Ok(serde_json::to_writer(w, &v)?))?;
    Ok(json!({"command": "graph-export", "nodes": g.len(), "edges": g.edges.len(), "out": a.out}))
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("GSUN_THREADS") {
            Ok(s) => Some(s.trim().parse::<usize>().map_err(|e| Error::Parse(format!("GSUN_THREADS={s:?}: {e}")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::InvalidParameter("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Value> {
    configure_threads(cli.threads)?;
    match &cli.cmd {
        Command::Simulate(a) => run_simulate(a),
        Command::Krige(a) => run_krige(a),
        Command::Pit(a) => run_pit(a),
        Command::Train(a) => run_train(a),
        Command::Estimate(a) => run_estimate(a),
        Command::Uq(a) => run_uq(a),
        Command::GraphExport(a) => run_graph(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            let text = if cli.json { v.to_string() } else { serde_json::to_string_pretty(&v).unwrap_or_default() };
            // A closed pipe on stdout is not a failure of the computation.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.name());
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
