//! `geoembed` command line: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 internal failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::embedding::{read_embeddings, write_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::eval::{
    export_features, mean_region_cosines, read_region_labels, region_accuracy_at_k,
    top_k_neighbors_with, write_neighbors, write_region_labels, RegionLabeling,
};
use crate::exec::Exec;
use crate::geo::{cell_from_point, CellId, GeoPoint, DEFAULT_LEVEL};
use crate::graph::{
    build_flow_graph_with, build_spatial_graph_with, normalize_adjacency, read_graph, write_graph,
    GraphKind, WeightedGraph, DEFAULT_DELTA_M,
};
use crate::manifest::{record_stage, verify_input, StageRecord};
use crate::model::{train, Aggregation, GraphSet, Graphs, ModelConfig, TrainConfig};
use crate::synth::{generate_synthetic_city, write_records, SyntheticCityConfig};
use crate::trajectory::{
    build_location_index, parse_records_file, read_index, read_trajectories, sessionize_with,
    write_index, write_trajectories, LocationIndex, Trajectory, DEFAULT_MAX_GAP,
};

#[derive(Debug, Parser)]
#[command(
    name = "geoembed",
    version,
    about = "Location embeddings from mobility trajectories"
)]
struct Cli {
    /// Only report warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic city with planted regions.
    Synth(SynthArgs),
    /// Sessionize LBS records into trajectories and build the location index.
    Ingest(IngestArgs),
    /// Build the flow and spatial graphs.
    BuildGraphs(BuildGraphsArgs),
    /// Train location embeddings.
    Train(TrainArgs),
    /// Nearest locations to one cell by cosine similarity.
    Query(QueryArgs),
    /// Region Accuracy@K and optional feature export.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// Output records CSV.
    #[arg(long)]
    out: PathBuf,
    /// Output `cell_id,region_id` CSV.
    #[arg(long)]
    regions_out: PathBuf,
    #[arg(long, default_value_t = 4)]
    regions: usize,
    #[arg(long, default_value_t = 25)]
    cells_per_region: usize,
    /// Per-step probability of jumping to another region.
    #[arg(long, default_value_t = 0.05)]
    inter_region_prob: f64,
    #[arg(long, default_value_t = 2000)]
    trajectories: usize,
    #[arg(long, default_value_t = 10)]
    length: usize,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: u8,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    /// Records as `user_id,timestamp,lat,lng`, optionally gzipped.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_trajectories: PathBuf,
    #[arg(long)]
    out_index: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: u8,
    /// Longest gap in seconds inside one trajectory.
    #[arg(long, default_value_t = DEFAULT_MAX_GAP)]
    max_gap: u64,
    /// Add never-visited cells of the bounding box to the index.
    #[arg(long)]
    densify: bool,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args, Serialize)]
struct BuildGraphsArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    out_flow: PathBuf,
    #[arg(long)]
    out_spatial: PathBuf,
    /// Spatial threshold in meters.
    #[arg(long, default_value_t = DEFAULT_DELTA_M)]
    delta: f64,
    /// Drop flow edges seen fewer times.
    #[arg(long, default_value_t = 1)]
    min_count: u64,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    spatial: PathBuf,
    /// Output embedding file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.025)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    min_lr: f64,
    /// Relative epoch-loss change that counts as converged.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// `mean` or `max`.
    #[arg(long, default_value = "mean")]
    agg: Aggregation,
    /// `both`, `flow` or `spatial`.
    #[arg(long, default_value = "both")]
    graphs: GraphSet,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Single worker and bit-reproducible output.
    #[arg(long)]
    deterministic: bool,
    /// Worker threads for the parallel mode.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct QueryArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Query cell as `level:index`.
    #[arg(long, conflicts_with_all = ["lat", "lng"])]
    cell: Option<String>,
    #[arg(long, requires = "lng", allow_negative_numbers = true)]
    lat: Option<f64>,
    #[arg(long, requires = "lat", allow_negative_numbers = true)]
    lng: Option<f64>,
    #[arg(long, short, default_value_t = 5)]
    k: usize,
    /// Output CSV; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// `cell_id,region_id` CSV.
    #[arg(long)]
    regions: PathBuf,
    #[arg(long, short, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    samples_per_region: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write `cell_id,v1..vd` features for every location.
    #[arg(long)]
    features: Option<PathBuf>,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();

    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Ingest(a) => ingest(&a),
        Command::BuildGraphs(a) => build_graphs(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Query(a) => query(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn exec_for(deterministic: bool) -> Exec {
    if deterministic {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::file(path, e))
}

fn open_verified(path: &Path, inputs: &mut BTreeMap<String, String>) -> Result<File> {
    let digest = verify_input(path)?;
    inputs.insert(path.display().to_string(), digest);
    File::open(path).map_err(|e| Error::file(path, e))
}

fn source(path: &Path) -> String {
    path.display().to_string()
}

fn finish<A: Serialize>(
    stage: &str,
    args: &A,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    start: Instant,
    outputs: &[&Path],
) -> Result<()> {
    let record = StageRecord {
        stage: stage.to_string(),
        config: serde_json::to_value(args)?,
        seed,
        inputs,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    record_stage(&record, outputs)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = SyntheticCityConfig {
        regions: a.regions,
        cells_per_region: a.cells_per_region,
        inter_region_prob: a.inter_region_prob,
        trajectories: a.trajectories,
        trajectory_len: a.length,
        level: a.level,
        seed: a.seed,
        ..Default::default()
    };
    let city = generate_synthetic_city(&cfg)?;
    write_records(create(&a.out)?, &city.records)?;
    write_region_labels(create(&a.regions_out)?, &city.labels)?;
    info!(
        "synth: {} records over {} cells",
        city.records.len(),
        city.labels.len()
    );
    finish(
        "synth",
        a,
        Some(a.seed),
        BTreeMap::new(),
        start,
        &[&a.out, &a.regions_out],
    )
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let start = Instant::now();
    let mut inputs = BTreeMap::new();
    inputs.insert(source(&a.input), verify_input(&a.input)?);
    let parsed = parse_records_file(&a.input)?;
    if !parsed.rejections.is_empty() {
        warn!(
            "ingest: skipped {} malformed lines",
            parsed.rejections.len()
        );
        for r in parsed.rejections.iter().take(5) {
            warn!("  line {}: {}", r.line, r.reason);
        }
    }
    let trajs = sessionize_with(
        &parsed.records,
        a.max_gap,
        a.level,
        exec_for(a.deterministic),
    )?;
    let mut index = build_location_index(&trajs)?;
    if a.densify {
        let added = index.densify_bounding_box()?;
        info!("ingest: densify added {added} unvisited cells");
    }
    write_trajectories(create(&a.out_trajectories)?, &trajs)?;
    write_index(create(&a.out_index)?, &index)?;
    info!(
        "ingest: {} records -> {} trajectories, {} locations",
        parsed.records.len(),
        trajs.len(),
        index.len()
    );
    finish(
        "ingest",
        a,
        None,
        inputs,
        start,
        &[&a.out_trajectories, &a.out_index],
    )
}

fn load_corpus(
    trajectories: &Path,
    index: &Path,
    inputs: &mut BTreeMap<String, String>,
) -> Result<(Vec<Trajectory>, LocationIndex)> {
    let trajs = read_trajectories(open_verified(trajectories, inputs)?, &source(trajectories))?;
    let index = read_index(open_verified(index, inputs)?, &source(index))?;
    Ok((trajs, index))
}

fn build_graphs(a: &BuildGraphsArgs) -> Result<()> {
    let start = Instant::now();
    let mut inputs = BTreeMap::new();
    let (trajs, index) = load_corpus(&a.trajectories, &a.index, &mut inputs)?;
    let exec = exec_for(a.deterministic);
    let flow = build_flow_graph_with(&trajs, &index, a.min_count, exec)?;
    let spatial = build_spatial_graph_with(&index, a.delta, exec)?;
    write_graph(create(&a.out_flow)?, &flow)?;
    write_graph(create(&a.out_spatial)?, &spatial)?;
    info!(
        "build-graphs: {} locations, {} flow edges, {} spatial edges",
        index.len(),
        flow.edge_count(),
        spatial.edge_count()
    );
    finish(
        "build-graphs",
        a,
        None,
        inputs,
        start,
        &[&a.out_flow, &a.out_spatial],
    )
}

fn load_graph(
    path: &Path,
    kind: GraphKind,
    n: usize,
    inputs: &mut BTreeMap<String, String>,
) -> Result<WeightedGraph> {
    let g = read_graph(open_verified(path, inputs)?, &source(path))?;
    if g.kind() != kind {
        return Err(Error::InvalidConfig(format!(
            "{} holds a {} graph, expected {kind}",
            path.display(),
            g.kind()
        )));
    }
    if g.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} has {} vertices, the index has {n} locations",
            path.display(),
            g.n()
        )));
    }
    Ok(g)
}

fn set_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(t) = threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .is_err()
        {
            warn!("thread pool already initialized; --threads ignored");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if threads.is_some() {
        warn!("built without the parallel feature; --threads ignored");
    }
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    set_threads(a.threads);
    let mut inputs = BTreeMap::new();
    let (trajs, index) = load_corpus(&a.trajectories, &a.index, &mut inputs)?;
    let flow = load_graph(&a.flow, GraphKind::Flow, index.len(), &mut inputs)?;
    let spatial = load_graph(&a.spatial, GraphKind::Spatial, index.len(), &mut inputs)?;
    if a.graphs != GraphSet::Both {
        info!("train: using the {} graph only", a.graphs);
    }
    let graphs = Graphs::new(normalize_adjacency(&flow), normalize_adjacency(&spatial))?;
    let cfg = TrainConfig {
        model: ModelConfig {
            dim: a.dim,
            layers: a.layers,
            aggregation: a.agg,
            graphs: a.graphs,
            ..Default::default()
        },
        window: a.window,
        negatives: a.negatives,
        learning_rate: a.lr,
        min_learning_rate: a.min_lr,
        epochs: a.epochs,
        tolerance: a.tolerance,
        seed: a.seed,
        deterministic: a.deterministic,
    };
    let trained = train(&trajs, &graphs, &index, &cfg)?;
    let r = &trained.report;
    info!(
        "train: {} epochs{}, final loss {:.6}",
        r.epochs_run,
        if r.converged { " (converged)" } else { "" },
        r.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    if r.batches_without_negatives > 0 {
        warn!(
            "train: {} centers had no negative candidates",
            r.batches_without_negatives
        );
    }
    write_embeddings(create(&a.out)?, &trained.embeddings)?;
    finish("train", a, Some(a.seed), inputs, start, &[&a.out])
}

fn query(a: &QueryArgs) -> Result<()> {
    let start = Instant::now();
    let mut inputs = BTreeMap::new();
    let emb = read_embeddings(
        open_verified(&a.embeddings, &mut inputs)?,
        &source(&a.embeddings),
    )?;
    let cell: CellId = match (&a.cell, a.lat, a.lng) {
        (Some(c), _, _) => c.parse()?,
        (None, Some(lat), Some(lng)) => {
            let level = emb.cells().first().map_or(DEFAULT_LEVEL, CellId::level);
            cell_from_point(GeoPoint::new(lat, lng)?, level)?
        }
        _ => {
            return Err(Error::InvalidConfig(
                "give --cell or both --lat and --lng".into(),
            ))
        }
    };
    let id = emb.id_of(&cell).ok_or(Error::UnknownCell(cell))?;
    let neighbors = top_k_neighbors_with(&emb, id, a.k, exec_for(a.deterministic))?;
    match &a.out {
        Some(path) => {
            write_neighbors(create(path)?, &emb, &neighbors)?;
            finish("query", a, None, inputs, start, &[path])
        }
        None => write_neighbors(io::stdout().lock(), &emb, &neighbors),
    }
}

#[derive(Debug, Serialize)]
struct EvalReport {
    k: usize,
    accuracy: f64,
    sampled_locations: usize,
    skipped_regions: Vec<u64>,
    unmatched_labels: usize,
    mean_intra_region_cosine: Option<f64>,
    mean_inter_region_cosine: Option<f64>,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let mut inputs = BTreeMap::new();
    let emb: EmbeddingMatrix = read_embeddings(
        open_verified(&a.embeddings, &mut inputs)?,
        &source(&a.embeddings),
    )?;
    let pairs = read_region_labels(open_verified(&a.regions, &mut inputs)?, &source(&a.regions))?;
    let (labels, unmatched) = RegionLabeling::from_cells(&emb, &pairs);
    if unmatched > 0 {
        warn!("eval: {unmatched} labeled cells have no embedding");
    }
    let acc = region_accuracy_at_k(&emb, &labels, a.k, a.samples_per_region, a.seed)?;
    let cosines = mean_region_cosines(&emb, &labels).ok();
    let report = EvalReport {
        k: acc.k,
        accuracy: acc.accuracy,
        sampled_locations: acc.samples.len(),
        skipped_regions: acc.skipped_regions,
        unmatched_labels: unmatched,
        mean_intra_region_cosine: cosines.map(|c| c.0),
        mean_inter_region_cosine: cosines.map(|c| c.1),
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    let mut outputs: Vec<&Path> = Vec::new();
    match &a.out {
        Some(path) => {
            create(path)?
                .write_all(text.as_bytes())
                .map_err(|e| Error::file(path, e))?;
            outputs.push(path);
        }
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    if let Some(path) = &a.features {
        let ids: Vec<usize> = (0..emb.len()).collect();
        export_features(create(path)?, &emb, &ids)?;
        outputs.push(path);
    }
    info!("eval: Accuracy@{} = {:.4}", a.k, report.accuracy);
    if outputs.is_empty() {
        Ok(())
    } else {
        finish("eval", a, Some(a.seed), inputs, start, &outputs)
    }
}
