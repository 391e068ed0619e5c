//! Conversion logs: TSV ingestion, splitting, mini-batching and a synthetic
//! multi-domain generator with additive log-odds ground truth.
//!
//! Log lines are `y, z, type_code, scenario_code, field values...`,
//! tab-separated. Lines starting with `#` are comments; a header comment of
//! the form `#y\tz\ttype\tscenario\t<field>...` names the schema.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::domains::{compute_masks, dynamic_weights, BatchMasks, DomainId, DomainRegistry};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, Instance, Schema};
use crate::kv::KeyValues;
use crate::tensor::{sigmoid, RngState};

const HEADER_PREFIX: &str = "#y\tz\ttype\tscenario";

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionLog {
    pub schema: Schema,
    pub records: Vec<FeatureVector>,
}

impl ConversionLog {
    pub fn new(schema: Schema) -> Self {
        Self {
            schema,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Registry of every type and scenario code in the log, each sorted.
    pub fn infer_registry(&self) -> Result<DomainRegistry> {
        let mut types: Vec<&str> = self.records.iter().map(|r| r.type_code.as_str()).collect();
        let mut scenarios: Vec<&str> = self.records.iter().map(|r| r.scenario_code.as_str()).collect();
        types.sort_unstable();
        types.dedup();
        scenarios.sort_unstable();
        scenarios.dedup();
        DomainRegistry::new(types, scenarios)
    }

    /// First `fraction` of the records (by index) and the rest.
    pub fn split(&self, fraction: f64) -> (ConversionLog, ConversionLog) {
        let cut = ((self.records.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.records.len());
        (
            ConversionLog {
                schema: self.schema.clone(),
                records: self.records[..cut].to_vec(),
            },
            ConversionLog {
                schema: self.schema.clone(),
                records: self.records[cut..].to_vec(),
            },
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 48);
        out.push_str(HEADER_PREFIX);
        for f in self.schema.fields() {
            out.push('\t');
            out.push_str(f);
        }
        out.push('\n');
        for r in &self.records {
            push_record(&mut out, r);
            out.push('\n');
        }
        out
    }
}

pub(crate) fn push_record(out: &mut String, r: &FeatureVector) {
    let _ = write!(
        out,
        "{}\t{}\t{}\t{}",
        u8::from(r.click),
        u8::from(r.conversion),
        r.type_code,
        r.scenario_code
    );
    for v in &r.values {
        out.push('\t');
        out.push_str(v);
    }
}

/// Schema named by a log's header comment, if present.
pub fn schema_from_header(text: &str) -> Option<Result<Schema>> {
    text.lines()
        .take_while(|l| l.starts_with('#') || l.trim().is_empty())
        .find_map(|l| l.strip_prefix(HEADER_PREFIX))
        .map(|rest| Schema::new(rest.split('\t').filter(|s| !s.is_empty())))
}

fn parse_label(v: &str, what: &str, path: &str, line: usize) -> Result<bool> {
    match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Parse {
            path: path.to_string(),
            line,
            msg: format!("{what} label must be 0 or 1, got {v:?}"),
        }),
    }
}

/// Parses one data line (no trailing newline).
pub fn parse_record(line: &str, schema: &Schema, path: &str, line_no: usize) -> Result<FeatureVector> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 4 + schema.len() {
        return Err(Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: format!("expected {} columns, got {}", 4 + schema.len(), cols.len()),
        });
    }
    let y = parse_label(cols[0], "click", path, line_no)?;
    let z = parse_label(cols[1], "conversion", path, line_no)?;
    if z && !y {
        return Err(Error::Integrity {
            path: path.to_string(),
            line: line_no,
        });
    }
    if cols[2].is_empty() || cols[3].is_empty() {
        return Err(Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: "empty type or scenario code".into(),
        });
    }
    Ok(FeatureVector {
        values: cols[4..].iter().map(|s| s.to_string()).collect(),
        type_code: cols[2].to_string(),
        scenario_code: cols[3].to_string(),
        click: y,
        conversion: z,
    })
}

pub fn parse_tsv(text: &str, schema: Option<&Schema>, path: &str) -> Result<ConversionLog> {
    let schema = match schema {
        Some(s) => s.clone(),
        None => match schema_from_header(text) {
            Some(s) => s?,
            None => {
                if text.lines().all(|l| l.trim().is_empty() || l.starts_with('#')) {
                    Schema::new(Vec::<String>::new())?
                } else {
                    return Err(Error::Config(format!(
                        "{path}: no schema given and no `{HEADER_PREFIX}` header line"
                    )));
                }
            }
        },
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        records.push(parse_record(line, &schema, path, i + 1)?);
    }
    Ok(ConversionLog { schema, records })
}

/// Loads a TSV conversion log. Without an explicit schema the header comment
/// is used.
pub fn load_tsv(path: &Path, schema: Option<&Schema>) -> Result<ConversionLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, schema, &path.display().to_string())
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tsv(path: &Path, log: &ConversionLog) -> Result<()> {
    write_atomic(path, log.to_tsv().as_bytes())
}

/// A batch of encoded instances with its domain masks and dynamic weights.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub instances: Vec<Instance>,
    pub masks: BatchMasks,
    pub weights: Vec<f64>,
}

impl MiniBatch {
    pub fn new(instances: Vec<Instance>, registry: &DomainRegistry) -> Result<Self> {
        let ids: Vec<DomainId> = instances.iter().map(|i| i.domain).collect();
        let masks = compute_masks(&ids, registry)?;
        let weights = dynamic_weights(&masks);
        Ok(Self {
            instances,
            masks,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn clicks(&self) -> Vec<f64> {
        self.instances.iter().map(Instance::y).collect()
    }

    pub fn conversions(&self) -> Vec<f64> {
        self.instances.iter().map(Instance::z).collect()
    }
}

/// Index order of one epoch: shuffled with a stream derived from
/// `(seed, epoch)`, or sequential when `seed` is `None`.
pub fn epoch_order(n: usize, seed: Option<u64>, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        RngState::derive(seed, epoch).shuffle(&mut order);
    }
    order
}

/// Mixed-domain mini-batches over `instances` for one epoch. The final batch
/// may be smaller than `batch_size`.
pub fn batches<'a>(
    instances: &'a [Instance],
    registry: &'a DomainRegistry,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
) -> impl Iterator<Item = Result<MiniBatch>> + 'a {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let order = epoch_order(instances.len(), shuffle_seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| {
        MiniBatch::new(idx.iter().map(|&i| instances[i].clone()).collect(), registry)
    })
}

/// Parameters of the synthetic log generator.
///
/// Ground truth: `y ~ Bernoulli(σ(ctr_intercept + Σ_f a_f(x_f)))` and, for
/// clicks, `z ~ Bernoulli(σ(cvr_intercept + Σ_f b_f(x_f) + Σ_f c_{t,f}(x_f) + u_t + v_s))`
/// where `a`, `b` are per-value effects drawn once per spec with standard
/// deviations `ctr_feature_scale` / `cvr_feature_scale`, `c_t` are optional
/// per-type effects (`type_feature_scale`), and `u`, `v` the type and
/// scenario offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub type_offsets: Vec<f64>,
    pub scenario_offsets: Vec<f64>,
    pub cvr_intercept: f64,
    pub ctr_intercept: f64,
    pub num_fields: usize,
    pub vocab_size: usize,
    pub cvr_feature_scale: f64,
    pub ctr_feature_scale: f64,
    pub type_feature_scale: f64,
    pub instances: usize,
    /// Relative weights of types and scenarios; domain mixture is their
    /// product unless `dominant_share` is set.
    pub type_weights: Vec<f64>,
    pub scenario_weights: Vec<f64>,
    /// Share of instances assigned to domain `(t0, s0)`; the rest follow the
    /// product mixture over the remaining domains.
    pub dominant_share: Option<f64>,
    pub seed: u64,
}

const SPEC_KEYS: &[&str] = &[
    "num_types",
    "num_scenarios",
    "type_offsets",
    "scenario_offsets",
    "type_cvr_range",
    "scenario_offset_range",
    "cvr_intercept",
    "ctr_intercept",
    "num_fields",
    "vocab_size",
    "cvr_feature_scale",
    "ctr_feature_scale",
    "type_feature_scale",
    "instances",
    "type_weights",
    "scenario_weights",
    "dominant_share",
    "seed",
];

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl SyntheticSpec {
    /// Uniform mixture, no feature effects, all offsets zero.
    pub fn neutral(num_types: usize, num_scenarios: usize, instances: usize, seed: u64) -> Self {
        Self {
            type_offsets: vec![0.0; num_types],
            scenario_offsets: vec![0.0; num_scenarios],
            cvr_intercept: 0.0,
            ctr_intercept: 0.0,
            num_fields: 2,
            vocab_size: 10,
            cvr_feature_scale: 0.0,
            ctr_feature_scale: 0.0,
            type_feature_scale: 0.0,
            instances,
            type_weights: vec![1.0; num_types],
            scenario_weights: vec![1.0; num_scenarios],
            dominant_share: None,
            seed,
        }
    }

    pub fn num_types(&self) -> usize {
        self.type_offsets.len()
    }

    pub fn num_scenarios(&self) -> usize {
        self.scenario_offsets.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.type_offsets.is_empty() || self.scenario_offsets.is_empty() {
            return bad("need at least one type and one scenario");
        }
        if self.type_weights.len() != self.num_types() || self.scenario_weights.len() != self.num_scenarios() {
            return bad("mixture weights must match type/scenario counts");
        }
        if self
            .type_weights
            .iter()
            .chain(&self.scenario_weights)
            .any(|w| !w.is_finite() || *w < 0.0)
            || self.type_weights.iter().sum::<f64>() <= 0.0
            || self.scenario_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("mixture weights must be non-negative with positive sum");
        }
        if let Some(s) = self.dominant_share {
            if !(0.0..=1.0).contains(&s) || (s < 1.0 && self.num_types() * self.num_scenarios() == 1) {
                return bad("dominant_share must lie in [0, 1] and needs another domain");
            }
        }
        if self.num_fields == 0 || self.vocab_size == 0 {
            return bad("num_fields and vocab_size must be positive");
        }
        let finite = [
            self.cvr_intercept,
            self.ctr_intercept,
            self.cvr_feature_scale,
            self.ctr_feature_scale,
            self.type_feature_scale,
        ];
        if finite.iter().chain(&self.type_offsets).chain(&self.scenario_offsets).any(|v| !v.is_finite())
            || self.cvr_feature_scale < 0.0
            || self.ctr_feature_scale < 0.0
            || self.type_feature_scale < 0.0
        {
            return bad("offsets, intercepts and scales must be finite (scales non-negative)");
        }
        Ok(())
    }

    /// Parses the key-value spec format. `type_cvr_range = lo, hi` places the
    /// type offsets so that `σ(cvr_intercept + u_t)` spans `[lo, hi]` evenly in
    /// log-odds; `scenario_offset_range = lo, hi` spaces scenario offsets.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(SPEC_KEYS)?;
        let cvr_intercept = kv.get_or("cvr_intercept", 0.0)?;
        let type_offsets = match (kv.list::<f64>("type_offsets")?, kv.list::<f64>("type_cvr_range")?) {
            (Some(o), None) => o,
            (None, Some(r)) => {
                let n: usize = kv.require("num_types")?;
                if r.len() != 2 || !(0.0 < r[0] && r[0] <= r[1] && r[1] < 1.0) {
                    return Err(Error::Config("type_cvr_range must be `lo, hi` within (0, 1)".into()));
                }
                linspace(logit(r[0]) - cvr_intercept, logit(r[1]) - cvr_intercept, n)
            }
            (None, None) => vec![0.0; kv.require::<usize>("num_types")?],
            (Some(_), Some(_)) => {
                return Err(Error::Config("give type_offsets or type_cvr_range, not both".into()))
            }
        };
        let scenario_offsets = match (
            kv.list::<f64>("scenario_offsets")?,
            kv.list::<f64>("scenario_offset_range")?,
        ) {
            (Some(o), None) => o,
            (None, Some(r)) if r.len() == 2 => linspace(r[0], r[1], kv.require("num_scenarios")?),
            (None, None) => vec![0.0; kv.require::<usize>("num_scenarios")?],
            _ => {
                return Err(Error::Config(
                    "give scenario_offsets or a two-element scenario_offset_range".into(),
                ))
            }
        };
        if let Some(n) = kv.get::<usize>("num_types")? {
            if n != type_offsets.len() {
                return Err(Error::Config("num_types disagrees with type_offsets".into()));
            }
        }
        if let Some(n) = kv.get::<usize>("num_scenarios")? {
            if n != scenario_offsets.len() {
                return Err(Error::Config("num_scenarios disagrees with scenario_offsets".into()));
            }
        }
        let spec = Self {
            type_weights: kv.list("type_weights")?.unwrap_or_else(|| vec![1.0; type_offsets.len()]),
            scenario_weights: kv
                .list("scenario_weights")?
                .unwrap_or_else(|| vec![1.0; scenario_offsets.len()]),
            type_offsets,
            scenario_offsets,
            cvr_intercept,
            ctr_intercept: kv.get_or("ctr_intercept", 0.0)?,
            num_fields: kv.get_or("num_fields", 4)?,
            vocab_size: kv.get_or("vocab_size", 20)?,
            cvr_feature_scale: kv.get_or("cvr_feature_scale", 0.0)?,
            ctr_feature_scale: kv.get_or("ctr_feature_scale", 0.0)?,
            type_feature_scale: kv.get_or("type_feature_scale", 0.0)?,
            instances: kv.require("instances")?,
            dominant_share: kv.get("dominant_share")?,
            seed: kv.require("seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn registry(&self) -> DomainRegistry {
        DomainRegistry::with_counts(self.num_types(), self.num_scenarios())
            .expect("validated spec has non-empty domain lists")
    }

    pub fn schema(&self) -> Schema {
        Schema::new((0..self.num_fields).map(|f| format!("f{f}"))).expect("generated names are valid")
    }

    /// Probability of each domain in flattened `(type, scenario)` order.
    pub fn domain_mixture(&self) -> Vec<f64> {
        let tw: f64 = self.type_weights.iter().sum();
        let sw: f64 = self.scenario_weights.iter().sum();
        let mut probs: Vec<f64> = self
            .type_weights
            .iter()
            .flat_map(|&t| self.scenario_weights.iter().map(move |&s| t / tw * s / sw))
            .collect();
        if let Some(share) = self.dominant_share {
            let rest: f64 = probs[1..].iter().sum();
            probs[0] = share;
            for p in &mut probs[1..] {
                *p = if rest > 0.0 { *p / rest * (1.0 - share) } else { 0.0 };
            }
        }
        probs
    }

    /// `σ(cvr_intercept + u_t + v_s)`: conversion rate among clicks of each
    /// domain at zero feature effect (exact when the feature scales are 0).
    pub fn domain_cvr(&self, d: DomainId) -> f64 {
        sigmoid(self.cvr_intercept + self.type_offsets[d.type_idx] + self.scenario_offsets[d.scenario_idx])
    }

    /// Mixture-weighted conversion rates per type and per scenario.
    pub fn marginal_cvrs(&self) -> (Vec<f64>, Vec<f64>) {
        let ns = self.num_scenarios();
        let mix = self.domain_mixture();
        let mut t_num = vec![0.0; self.num_types()];
        let mut t_den = vec![0.0; self.num_types()];
        let mut s_num = vec![0.0; ns];
        let mut s_den = vec![0.0; ns];
        for (flat, &p) in mix.iter().enumerate() {
            let d = DomainId::new(flat / ns, flat % ns);
            let c = self.domain_cvr(d);
            t_num[d.type_idx] += p * c;
            t_den[d.type_idx] += p;
            s_num[d.scenario_idx] += p * c;
            s_den[d.scenario_idx] += p;
        }
        let div = |n: Vec<f64>, d: Vec<f64>| {
            n.into_iter()
                .zip(d)
                .map(|(n, d)| if d > 0.0 { n / d } else { f64::NAN })
                .collect()
        };
        (div(t_num, t_den), div(s_num, s_den))
    }

    /// Sidecar text listing closed-form conversion rates.
    pub fn ground_truth_report(&self) -> String {
        let reg = self.registry();
        let mut out = String::from("# closed-form conversion rate among clicks at zero feature effect\n");
        out.push_str("# kind\ttype\tscenario\tcvr\n");
        let mix = self.domain_mixture();
        for (flat, share) in mix.iter().enumerate() {
            let d = reg.from_flat(flat);
            let _ = writeln!(
                out,
                "domain\t{}\t{}\t{:.6}\t# share {:.6}",
                reg.type_code(d.type_idx),
                reg.scenario_code(d.scenario_idx),
                self.domain_cvr(d),
                share
            );
        }
        let (types, scenarios) = self.marginal_cvrs();
        for (i, c) in types.iter().enumerate() {
            let _ = writeln!(out, "type\t{}\t*\t{c:.6}", reg.type_code(i));
        }
        for (j, c) in scenarios.iter().enumerate() {
            let _ = writeln!(out, "scenario\t*\t{}\t{c:.6}", reg.scenario_code(j));
        }
        out
    }
}

fn effect_table(rng: &mut RngState, fields: usize, vocab: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..fields)
        .map(|_| (0..vocab).map(|_| rng.normal(0.0, scale)).collect())
        .collect()
}

/// Draws a log from `spec`. Every generated record satisfies `z ⇒ y`.
pub fn generate(spec: &SyntheticSpec) -> Result<ConversionLog> {
    spec.validate()?;
    let reg = spec.registry();
    let mut rng = RngState::new(spec.seed);
    let (f, v) = (spec.num_fields, spec.vocab_size);
    let ctr_effects = effect_table(&mut rng, f, v, spec.ctr_feature_scale);
    let cvr_effects = effect_table(&mut rng, f, v, spec.cvr_feature_scale);
    let type_effects: Vec<Vec<Vec<f64>>> = (0..spec.num_types())
        .map(|_| effect_table(&mut rng, f, v, spec.type_feature_scale))
        .collect();
    let cumulative: Vec<f64> = spec
        .domain_mixture()
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let value_names: Vec<String> = (0..v).map(|k| format!("v{k}")).collect();

    let mut records = Vec::with_capacity(spec.instances);
    for _ in 0..spec.instances {
        let d = reg.from_flat(rng.categorical(&cumulative));
        let values: Vec<usize> = (0..f).map(|_| rng.below(v)).collect();
        let ctr_logit = spec.ctr_intercept
            + values.iter().enumerate().map(|(fi, &k)| ctr_effects[fi][k]).sum::<f64>();
        let click = rng.bernoulli(sigmoid(ctr_logit));
        let conversion = click && {
            let te = &type_effects[d.type_idx];
            let cvr_logit = spec.cvr_intercept
                + spec.type_offsets[d.type_idx]
                + spec.scenario_offsets[d.scenario_idx]
                + values
                    .iter()
                    .enumerate()
                    .map(|(fi, &k)| cvr_effects[fi][k] + te[fi][k])
                    .sum::<f64>();
            rng.bernoulli(sigmoid(cvr_logit))
        };
        records.push(FeatureVector {
            values: values.iter().map(|&k| value_names[k].clone()).collect(),
            type_code: reg.type_code(d.type_idx).to_string(),
            scenario_code: reg.scenario_code(d.scenario_idx).to_string(),
            click,
            conversion,
        });
    }
    Ok(ConversionLog {
        schema: spec.schema(),
        records,
    })
}
