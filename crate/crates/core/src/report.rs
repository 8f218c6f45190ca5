//! End-to-end analysis producing the report bundle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::anova::{anova_distances, order_sensitivity, AnovaOptions, AnovaTable};
use crate::data::{
    consolidate_identity_attributes, derive_all_covariates, load_images, load_pairs, ImageTable,
    PairAggregate,
};
use crate::diagnostics::{simulate_residuals, DEFAULT_SIMULATIONS};
use crate::error::{Error, Result};
use crate::logit::{
    bootstrap_marginal_effects, build_design, coefficient_table, fit_logit, interpret,
    marginal_effects, DesignOptions, FitOptions, MarginalEffect, Subset,
};
use crate::metrics::{diversity_of, fairness_report, group_confusion, optimize_threshold, FairnessReport};
use crate::schema::{load_schema, AttributeSchema, Scope};
use crate::svg;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub schema: PathBuf,
    pub images: PathBuf,
    pub pairs: PathBuf,
    pub group_by: Vec<String>,
    pub min_support: u64,
    pub alpha: f64,
    /// Defaults to schema order.
    pub factor_order: Option<Vec<String>>,
    pub pair_aggregate: PairAggregate,
    pub seed: u64,
    #[serde(skip)]
    pub out: PathBuf,
    /// Bootstrap resamples for marginal-effect standard errors; 0 disables.
    pub bootstrap: usize,
    pub interactions: bool,
    /// Emit eta-squared ranges over all factor orders.
    pub eta_ranges: bool,
    pub n_simulations: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            schema: PathBuf::new(),
            images: PathBuf::new(),
            pairs: PathBuf::new(),
            group_by: vec!["gender".into(), "ethnicity".into()],
            min_support: 30,
            alpha: 0.05,
            factor_order: None,
            pair_aggregate: PairAggregate::Mean,
            seed: 0,
            out: PathBuf::from("report"),
            bootstrap: 0,
            interactions: false,
            eta_ranges: false,
            n_simulations: DEFAULT_SIMULATIONS,
        }
    }
}

/// Seed of a named sub-stream of the top-level seed.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a of the name selects the ChaCha stream
    let stream = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Named output files in write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Bundle {
    fn add(&mut self, name: &str, content: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), content.into()));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("report values serialize");
        text.push('\n');
        self.add(name, text);
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }

    /// Writes every file into `dir`; on failure the files already written are removed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, content) in &self.files {
            let path = dir.join(name);
            if let Err(e) = std::fs::write(&path, content) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                return Err(Error::io(&path, e));
            }
            written.push(path);
        }
        Ok(())
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn per_group_csv(report: &FairnessReport) -> String {
    let mut out = String::from(
        "group,n_pos,n_neg,tp,fp,tn,fn,tmr_pct,fmr_pct,accuracy_pct,selection_rate_pct\n",
    );
    for g in &report.per_group {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            csv_escape(&g.group.label()),
            g.n_pos,
            g.n_neg,
            g.tp,
            g.fp,
            g.tn,
            g.fn_,
            opt(g.tmr.map(|v| v * 100.0)),
            opt(g.fmr.map(|v| v * 100.0)),
            g.accuracy * 100.0,
            g.selection_rate * 100.0
        );
    }
    out
}

fn anova_csv(t: &AnovaTable) -> String {
    let mut out = String::from("factor,df,sum_squares,eta_squared\n");
    for f in &t.factors {
        let _ = writeln!(out, "{},{},{},{}", csv_escape(&f.name), f.df, f.sum_squares, f.eta_squared);
    }
    let _ = writeln!(out, "Residuals,{},{},", t.residual_df, t.residual_ss);
    let _ = writeln!(out, "Total,{},{},{}", t.n.saturating_sub(1), t.total_ss, t.r_squared);
    out
}

#[derive(Serialize)]
struct EffectRow<'a> {
    model: &'static str,
    #[serde(flatten)]
    effect: &'a MarginalEffect,
    bootstrap_std_error: Option<f64>,
    interpretation: String,
}

struct ModelOutput {
    subset: Subset,
    coefficients_csv: String,
    effects: Vec<MarginalEffect>,
    bootstrap: Option<Vec<f64>>,
    diagnostics: crate::diagnostics::ResidualDiagnostics,
    fit_summary: serde_json::Value,
}

fn run_model(
    subset: Subset,
    pairs: &[crate::data::PairRecord],
    covs: &[crate::data::PairCovariates],
    threshold: f64,
    schema: &AttributeSchema,
    config: &AnalysisConfig,
) -> Result<ModelOutput> {
    let design = build_design(pairs, covs, threshold, schema, subset, DesignOptions::default())?;
    let options = FitOptions::default();
    let fit = fit_logit(&design, options)?;
    let effects = marginal_effects(&fit, &design, config.alpha)?;
    let mut coefficients_csv = String::from("term,estimate,std_error,z,p\n");
    for row in coefficient_table(&fit, &design) {
        let _ = writeln!(
            coefficients_csv,
            "{},{},{},{},{}",
            csv_escape(&row.term),
            row.estimate,
            row.std_error,
            row.z,
            row.p
        );
    }
    let bootstrap = (config.bootstrap > 0).then(|| {
        let seed = substream_seed(config.seed, &format!("bootstrap/{}", subset.outcome()));
        bootstrap_marginal_effects(&design, options, config.bootstrap, seed).std_errors
    });
    let diag_seed = substream_seed(config.seed, &format!("diagnostics/{}", subset.outcome()));
    let diagnostics = simulate_residuals(&fit, &design, config.n_simulations, diag_seed)?;
    let fit_summary = json!({
        "n": design.nrows(),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "log_likelihood": fit.log_likelihood,
        "gradient_max_norm": fit.gradient_max_norm,
        "continuous_scaling": "continuous covariates standardized for fitting; coefficients and marginal effects reported per original unit",
    });
    Ok(ModelOutput {
        subset,
        coefficients_csv,
        effects,
        bootstrap,
        diagnostics,
        fit_summary,
    })
}

/// Runs the whole pipeline in memory and returns the bundle.
pub fn analyze(config: &AnalysisConfig) -> Result<Bundle> {
    let schema = load_schema(&config.schema)?;
    for g in &config.group_by {
        if !schema.require(g)?.is_categorical() {
            return Err(Error::Precondition(format!("grouping attribute {g} is not categorical")));
        }
    }
    let images = consolidate_identity_attributes(&load_images(&config.images, &schema)?, &schema)?;
    let pairs = load_pairs(&config.pairs, &images)?;
    let covs = derive_all_covariates(&pairs, &images, &schema, config.pair_aggregate)?;

    let choice = optimize_threshold(&pairs)?;
    let confusion = group_confusion(&pairs, &covs, choice.threshold, &config.group_by, config.min_support)?;
    let report = fairness_report(&confusion, choice.threshold)?;

    let (tmr, fmr) = rayon::join(
        || run_model(Subset::Positives, &pairs, &covs, choice.threshold, &schema, config),
        || run_model(Subset::Negatives, &pairs, &covs, choice.threshold, &schema, config),
    );
    let models = [tmr?, fmr?];

    let factor_order: Vec<String> = config
        .factor_order
        .clone()
        .unwrap_or_else(|| schema.names().map(str::to_string).collect());
    let anova_opts = AnovaOptions {
        interactions: config.interactions,
    };
    let anova_pos = anova_distances(&pairs, &covs, &schema, Subset::Positives, &factor_order, anova_opts)?;
    let anova_neg = anova_distances(&pairs, &covs, &schema, Subset::Negatives, &factor_order, anova_opts)?;

    let mut bundle = Bundle::default();
    let pct = |v: f64| v * 100.0;
    bundle.add_json(
        "fairness_report.json",
        &json!({
            "report": report,
            "threshold_accuracy": choice.accuracy,
            "percent": {
                "dob": pct(report.dob),
                "dpd": pct(report.dpd),
                "eod": pct(report.eod),
                "dpr": pct(report.dpr),
                "eor": pct(report.eor),
                "micro_accuracy": pct(report.micro_accuracy),
            },
            "grouping": config.group_by,
            "min_support": config.min_support,
        }),
    );
    bundle.add("per_group.csv", per_group_csv(&report));
    bundle.add("logit_tmr.csv", models[0].coefficients_csv.clone());
    bundle.add("logit_fmr.csv", models[1].coefficients_csv.clone());

    let mut rows = Vec::new();
    for m in &models {
        for (i, e) in m.effects.iter().enumerate() {
            rows.push(EffectRow {
                model: m.subset.outcome(),
                effect: e,
                bootstrap_std_error: m.bootstrap.as_ref().and_then(|b| b.get(i).copied()),
                interpretation: interpret(e, m.subset),
            });
        }
    }
    let mut me_csv = String::from(
        "model,attribute,level,reference,unit,estimate,std_error,z,p_value,significant,bootstrap_std_error\n",
    );
    for r in &rows {
        let e = r.effect;
        let _ = writeln!(
            me_csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            csv_escape(&e.attribute),
            csv_escape(e.level.as_deref().unwrap_or("")),
            csv_escape(e.reference.as_deref().unwrap_or("")),
            csv_escape(e.unit.as_deref().unwrap_or("")),
            e.estimate,
            e.std_error,
            e.z,
            e.p_value,
            e.significant,
            opt(r.bootstrap_std_error)
        );
    }
    bundle.add("marginal_effects.csv", me_csv);
    bundle.add_json(
        "marginal_effects.json",
        &json!({
            "alpha": config.alpha,
            "effects": rows,
            "fits": { "TMR": models[0].fit_summary, "FMR": models[1].fit_summary },
        }),
    );
    bundle.add(
        "marginal_effects.svg",
        svg::marginal_effects_chart(
            &[("FMR".to_string(), models[1].effects.clone())],
            "Marginal effect on FMR vs reference group",
        ),
    );

    for (name, table) in [("pos", &anova_pos), ("neg", &anova_neg)] {
        bundle.add(&format!("anova_{name}.csv"), anova_csv(table));
        let ranges = if config.eta_ranges {
            Some(order_sensitivity(&pairs, &covs, &schema, table.subset, &factor_order)?)
        } else {
            None
        };
        bundle.add_json(
            &format!("anova_{name}.json"),
            &json!({
                "table": table,
                "factor_order": factor_order,
                "decomposition": "sequential (Type I); eta squared depends on factor order when the design is unbalanced",
                "eta_squared_ranges_over_orders": ranges,
            }),
        );
        let label = if name == "pos" { "positive pairs" } else { "negative pairs" };
        bundle.add(
            &format!("anova_{name}.svg"),
            svg::anova_chart(&[(label.to_string(), table)], &format!("ANOVA eta squared, {label}")),
        );
    }

    bundle.add_json(
        "diagnostics.json",
        &json!({
            "TMR": models[0].diagnostics,
            "FMR": models[1].diagnostics,
            "note": "no fixed pass/fail thresholds; small p-values flag misspecification",
        }),
    );
    bundle.add(
        "diagnostics_qq.svg",
        svg::qq_chart(
            &[
                ("TMR".to_string(), models[0].diagnostics.scaled_residuals.as_slice()),
                ("FMR".to_string(), models[1].diagnostics.scaled_residuals.as_slice()),
            ],
            "Scaled residuals vs uniform",
        ),
    );

    let outputs: BTreeMap<&str, String> = bundle
        .files
        .iter()
        .map(|(n, c)| (n.as_str(), hex::encode(Sha256::digest(c))))
        .collect();
    bundle.add_json(
        "run_manifest.json",
        &json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "inputs": {
                "schema": { "path": config.schema, "sha256": sha256_file(&config.schema)? },
                "images": { "path": config.images, "sha256": sha256_file(&config.images)? },
                "pairs": { "path": config.pairs, "sha256": sha256_file(&config.pairs)? },
            },
            "config": config,
            "outputs_sha256": outputs,
        }),
    );
    Ok(bundle)
}

/// Per-attribute diversity of a dataset: identity-scoped attributes are counted
/// once per identity, image-scoped ones per image (continuous values binned).
pub fn dataset_diversity(images: &ImageTable, schema: &AttributeSchema) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for attr in &schema.attributes {
        let Some(n) = attr.n_categories() else {
            continue;
        };
        let records: Vec<&crate::data::ImageRecord> = match attr.scope {
            Scope::Identity => images.identities().map(|(_, imgs)| imgs[0]).collect(),
            Scope::Image => images.records().iter().collect(),
        };
        let labels = records
            .iter()
            .map(|img| {
                if attr.is_categorical() {
                    img.level(attr).map(str::to_string)
                } else {
                    img.real(&attr.name).and_then(|v| attr.bin_index(v)).map(|b| b.to_string())
                }
                .ok_or_else(|| Error::MissingAttribute {
                    image_id: img.image_id.clone(),
                    attribute: attr.name.clone(),
                })
            })
            .collect::<Result<Vec<String>>>()?;
        out.insert(attr.name.clone(), diversity_of(labels.iter().map(String::as_str), n)?);
    }
    Ok(out)
}

/// Two-line table: attribute names, then values to two decimals.
pub fn diversity_row(values: &BTreeMap<String, f64>, order: &[String]) -> String {
    let names: Vec<&String> = order.iter().filter(|n| values.contains_key(*n)).collect();
    let width = names.iter().map(|n| n.len()).max().unwrap_or(4).max(4);
    let mut head = String::new();
    let mut row = String::new();
    for n in names {
        let _ = write!(head, "{n:>width$} ");
        let _ = write!(row, "{:>width$.2} ", values[n]);
    }
    format!("{}\n{}\n", head.trim_end(), row.trim_end())
}
