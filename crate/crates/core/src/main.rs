use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use verifair::data::{consolidate_identity_attributes, load_images, PairAggregate};
use verifair::planner::{
    assign_styles, id_candidates, plan_diversity_report, sampling_weights, segment_cells,
    select_id_pool, style_candidates, PlannerAttributes,
};
use verifair::report::{analyze, dataset_diversity, diversity_row, substream_seed, AnalysisConfig};
use verifair::schema::load_schema;
use verifair::simulate::{generate, RateShift, SyntheticConfig, DEMO_SCHEMA};
use verifair::Error;

#[derive(Parser)]
#[command(name = "verifair", version, about = "Fairness analysis for face verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fairness metrics, logit marginal effects, ANOVA and diagnostics for a pair table.
    Analyze(AnalyzeArgs),
    /// Normalized-entropy diversity of each attribute in an image table.
    Diversity {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        schema: PathBuf,
    },
    /// Balanced ID pool plus per-identity style assignment, written as JSONL.
    Plan(PlanArgs),
    /// Inverse-frequency sampling weights as CSV.
    Weights {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Attributes to balance (comma separated).
        #[arg(long, value_delimiter = ',', required = true)]
        attrs: Vec<String>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a synthetic benchmark (schema.json, images.csv, pairs.csv).
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "gender,ethnicity")]
    group_by: Vec<String>,
    #[arg(long, default_value_t = 30)]
    min_support: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// ANOVA entry order; schema order when absent.
    #[arg(long, value_delimiter = ',')]
    factor_order: Option<Vec<String>>,
    #[arg(long, default_value = "mean")]
    pair_aggregate: PairAggregate,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Bootstrap resamples for marginal-effect standard errors (0 = off).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    /// Add two-way interactions between categorical factors to the ANOVA.
    #[arg(long)]
    interactions: bool,
    /// Report eta-squared ranges over every ANOVA factor order.
    #[arg(long)]
    eta_ranges: bool,
    #[arg(long, default_value_t = verifair::diagnostics::DEFAULT_SIMULATIONS)]
    simulations: usize,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    schema: PathBuf,
    /// Candidate ID images (image CSV).
    #[arg(long)]
    ids: PathBuf,
    /// Style image pool (image CSV).
    #[arg(long)]
    styles: PathBuf,
    #[arg(long)]
    n_identities: usize,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    identities: usize,
    #[arg(long, default_value_t = 4)]
    images_per_identity: usize,
    /// Positive and negative pairs each.
    #[arg(long, default_value_t = 1500)]
    pairs: usize,
    #[arg(long, default_value_t = 0.05)]
    base_fmr: f64,
    #[arg(long, default_value_t = 0.05)]
    base_fnmr: f64,
    /// FMR shifts as attr=level:delta, e.g. ethnicity=African:0.10.
    #[arg(long, value_delimiter = ',', default_value = "ethnicity=African:0.10")]
    fmr_shift: Vec<String>,
    /// FNMR shifts as attr=level:delta.
    #[arg(long, value_delimiter = ',', default_value = "gender=Female:0.05")]
    fnmr_shift: Vec<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn parse_shift(s: &str) -> Result<RateShift, Error> {
    let bad = || Error::Parse(format!("rate shift {s:?}: expected attr=level:delta"));
    let (attr, rest) = s.split_once('=').ok_or_else(bad)?;
    let (level, delta) = rest.split_once(':').ok_or_else(bad)?;
    Ok(RateShift {
        attribute: attr.to_string(),
        level: level.to_string(),
        delta: delta.parse().map_err(|_| bad())?,
    })
}

fn write_file(path: &PathBuf, content: &str) -> Result<(), Error> {
    std::fs::write(path, content).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Analyze(a) => {
            let config = AnalysisConfig {
                schema: a.schema,
                images: a.images,
                pairs: a.pairs,
                group_by: a.group_by,
                min_support: a.min_support,
                alpha: a.alpha,
                factor_order: a.factor_order,
                pair_aggregate: a.pair_aggregate,
                seed: a.seed,
                out: a.out,
                bootstrap: a.bootstrap,
                interactions: a.interactions,
                eta_ranges: a.eta_ranges,
                n_simulations: a.simulations,
            };
            let bundle = analyze(&config)?;
            bundle.write_to(&config.out)?;
            for (name, _) in &bundle.files {
                println!("{}", config.out.join(name).display());
            }
        }
        Command::Diversity { images, schema } => {
            let schema = load_schema(schema)?;
            let images = consolidate_identity_attributes(&load_images(images, &schema)?, &schema)?;
            let values = dataset_diversity(&images, &schema)?;
            let order: Vec<String> = schema.names().map(str::to_string).collect();
            print!("{}", diversity_row(&values, &order));
        }
        Command::Plan(p) => {
            let schema = load_schema(&p.schema)?;
            let attrs = PlannerAttributes::default();
            let ids = consolidate_identity_attributes(&load_images(&p.ids, &schema)?, &schema)?;
            let styles = consolidate_identity_attributes(&load_images(&p.styles, &schema)?, &schema)?;
            let cells = segment_cells(&schema, &attrs)?;
            let pool = select_id_pool(
                &id_candidates(&ids, &schema, &attrs)?,
                &cells,
                p.n_identities,
                substream_seed(p.seed, "planner"),
            )?;
            let plan = assign_styles(&pool, &style_candidates(&styles, &schema, &attrs)?, &attrs.segment, p.samples)?;
            write_file(&p.out, &plan.to_jsonl())?;
            let report = plan_diversity_report(&plan, &schema, &attrs)?;
            let order: Vec<String> = attrs
                .segment
                .iter()
                .cloned()
                .chain([attrs.age.clone(), attrs.pose.clone()])
                .collect();
            print!("{}", diversity_row(&report, &order));
            println!("\nage_bin pose_bin count");
            for ((a, b), n) in plan.style_histogram() {
                println!("{a} {b} {n}");
            }
        }
        Command::Weights {
            images,
            schema,
            attrs,
            out,
        } => {
            let schema = load_schema(schema)?;
            let images = consolidate_identity_attributes(&load_images(images, &schema)?, &schema)?;
            let weights = sampling_weights(&images, &schema, &attrs)?;
            let mut csv = String::from("image_id,weight,probability\n");
            for e in &weights.entries {
                csv.push_str(&format!("{},{},{}\n", e.image_id, e.weight, e.probability));
            }
            match out {
                Some(path) => write_file(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Simulate(s) => {
            let config = SyntheticConfig {
                n_identities: s.identities,
                images_per_identity: s.images_per_identity,
                n_positive_pairs: s.pairs,
                n_negative_pairs: s.pairs,
                base_fmr: s.base_fmr,
                base_fnmr: s.base_fnmr,
                fmr_shifts: s.fmr_shift.iter().map(|x| parse_shift(x)).collect::<Result<_, _>>()?,
                fnmr_shifts: s.fnmr_shift.iter().map(|x| parse_shift(x)).collect::<Result<_, _>>()?,
                seed: s.seed,
            };
            if config.images_per_identity < 2 || config.n_identities < 16 {
                return Err(Error::Precondition(
                    "need at least 2 images per identity and 16 identities".into(),
                ));
            }
            let data = generate(&config)?;
            std::fs::create_dir_all(&s.out).map_err(|e| Error::Parse(format!("{}: {e}", s.out.display())))?;
            write_file(&s.out.join("schema.json"), DEMO_SCHEMA)?;
            write_file(&s.out.join("images.csv"), &data.images_csv())?;
            write_file(&s.out.join("pairs.csv"), &data.pairs_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = std::env::var("FAVFA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
