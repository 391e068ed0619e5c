//! The full network: shared embedding, one CTR tower and per-domain CVR
//! towers composed from shared, type and scenario parameters, plus the
//! baseline and ablation variants behind the same interface.
//!
//! A mixed batch is routed by domain mask: each non-empty domain's tower is
//! composed once and run on that domain's rows, and the outputs are combined
//! so that every instance is scored by its own domain's parameters. Gradients
//! flow only into the towers that produced an output, so the parameters of a
//! type or scenario absent from the batch are left untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::data::MiniBatch;
use crate::domains::{compute_masks, BatchMasks, DomainId, DomainRegistry};
use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, FeatureEncoder, FeatureVector, Instance, Schema};
use crate::loss::{self, LossBreakdown, Weighting};
use crate::network::{self, Adagrad, ForwardCache, ParamSet, Tower, TowerArchitecture};
use crate::tensor::{sigmoid, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelMode {
    /// Composed domain towers, dynamically weighted CTCVR loss.
    Mmn,
    /// Shared parameters only; every domain uses the same CVR tower.
    MmnCommonParams,
    /// Composed domain towers trained with the plain CTCVR loss.
    MmnNoDynamicWeight,
    /// One CVR tower with type and scenario as input features.
    Esmm,
    /// One CVR tower trained on clicks only, type and scenario as features,
    /// no CTR tower.
    Dnn,
}

impl ModelMode {
    pub const ALL: [ModelMode; 5] = [
        ModelMode::Mmn,
        ModelMode::MmnCommonParams,
        ModelMode::MmnNoDynamicWeight,
        ModelMode::Esmm,
        ModelMode::Dnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Mmn => "mmn",
            ModelMode::MmnCommonParams => "mmn_common_params",
            ModelMode::MmnNoDynamicWeight => "mmn_no_dynamic_weight",
            ModelMode::Esmm => "esmm",
            ModelMode::Dnn => "dnn",
        }
    }

    pub fn has_domain_params(self) -> bool {
        matches!(self, ModelMode::Mmn | ModelMode::MmnNoDynamicWeight)
    }

    pub fn weighting(self) -> Weighting {
        match self {
            ModelMode::Mmn | ModelMode::MmnCommonParams => Weighting::Dynamic,
            _ => Weighting::None,
        }
    }

    /// Type and scenario are fed to the CVR tower as hashed features.
    pub fn domain_features(self) -> bool {
        matches!(self, ModelMode::Esmm | ModelMode::Dnn)
    }

    pub fn has_ctr_tower(self) -> bool {
        self != ModelMode::Dnn
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ModelMode::Mmn => 0,
            ModelMode::MmnCommonParams => 1,
            ModelMode::MmnNoDynamicWeight => 2,
            ModelMode::Esmm => 3,
            ModelMode::Dnn => 4,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == c)
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub layer_units: Vec<usize>,
    pub embedding_dim: usize,
    pub num_slots: usize,
    /// Feed type and scenario to the CTR tower as features even when the CVR
    /// towers do not see them.
    pub ctr_domain_features: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Mmn,
            layer_units: vec![32, 16],
            embedding_dim: 4,
            num_slots: 1 << 16,
            ctr_domain_features: false,
            seed: 0,
        }
    }
}

/// Probabilities for one instance. `p_ctr` is absent for models without a
/// CTR tower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_ctr: Option<f64>,
    pub p_cvr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    pub p_ctr: Option<Vec<f64>>,
    pub p_cvr: Vec<f64>,
}

impl BatchPrediction {
    pub fn get(&self, i: usize) -> Prediction {
        Prediction {
            p_ctr: self.p_ctr.as_ref().map(|p| p[i]),
            p_cvr: self.p_cvr[i],
        }
    }
}

/// Counters of CVR tower materializations and forward passes.
#[derive(Debug, Default)]
pub struct RoutingStats {
    compositions: AtomicU64,
    forwards: AtomicU64,
}

impl RoutingStats {
    pub fn compositions(&self) -> u64 {
        self.compositions.load(Ordering::Relaxed)
    }

    pub fn forwards(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.compositions.store(0, Ordering::Relaxed);
        self.forwards.store(0, Ordering::Relaxed);
    }
}

impl Clone for RoutingStats {
    fn clone(&self) -> Self {
        Self {
            compositions: AtomicU64::new(self.compositions()),
            forwards: AtomicU64::new(self.forwards()),
        }
    }
}

/// A named parameter group, for inspection and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Embedding,
    Ctr,
    Base,
    Type(usize),
    Scenario(usize),
}

/// Gradients of one batch loss. Type and scenario entries exist only for
/// codes present in the batch; embedding entries only for looked-up slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub embedding: BTreeMap<usize, Vec<f64>>,
    pub ctr: Option<ParamSet>,
    pub base: ParamSet,
    pub types: BTreeMap<usize, ParamSet>,
    pub scenarios: BTreeMap<usize, ParamSet>,
}

impl ModelGradients {
    /// Gradient of flat parameter `idx` in `group`; zero where absent.
    pub fn get(&self, group: ParamGroup, idx: usize, dim: usize) -> f64 {
        match group {
            ParamGroup::Embedding => self.embedding.get(&(idx / dim)).map_or(0.0, |g| g[idx % dim]),
            ParamGroup::Ctr => self.ctr.as_ref().map_or(0.0, |p| p.get(idx)),
            ParamGroup::Base => self.base.get(idx),
            ParamGroup::Type(t) => self.types.get(&t).map_or(0.0, |p| p.get(idx)),
            ParamGroup::Scenario(s) => self.scenarios.get(&s).map_or(0.0, |p| p.get(idx)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub alpha: f64,
    pub optimizer: Adagrad,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            optimizer: Adagrad::default(),
        }
    }
}

/// One CVR tower evaluation over a set of batch rows.
struct Route {
    domain: Option<DomainId>,
    rows: Vec<usize>,
}

struct RouteOutput {
    domain: Option<DomainId>,
    rows: Vec<usize>,
    params: ParamSet,
    cache: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct MmnModel {
    pub(crate) mode: ModelMode,
    pub(crate) registry: DomainRegistry,
    pub(crate) encoder: FeatureEncoder,
    pub(crate) embedding: EmbeddingTable,
    pub(crate) layer_units: Vec<usize>,
    pub(crate) ctr_domain_features: bool,
    pub(crate) ctr: Option<Tower>,
    pub(crate) base: Tower,
    pub(crate) types: Vec<Tower>,
    pub(crate) scenarios: Vec<Tower>,
    pub(crate) step: u64,
    stats: RoutingStats,
}

impl PartialEq for MmnModel {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.registry == other.registry
            && self.encoder.schema == other.encoder.schema
            && self.encoder.num_slots == other.encoder.num_slots
            && self.embedding == other.embedding
            && self.layer_units == other.layer_units
            && self.ctr_domain_features == other.ctr_domain_features
            && self.ctr == other.ctr
            && self.base == other.base
            && self.types == other.types
            && self.scenarios == other.scenarios
            && self.step == other.step
    }
}

impl MmnModel {
    /// Fresh model: embedding uniform in ±0.05, shared and CTR towers
    /// He-uniform, type and scenario sets zero.
    pub fn new(config: &ModelConfig, schema: Schema, registry: DomainRegistry) -> Result<Self> {
        if config.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        let encoder = FeatureEncoder::new(schema, config.num_slots)?;
        let mut rng = RngState::new(config.seed);
        let embedding = EmbeddingTable::random(config.num_slots, config.embedding_dim, &mut rng);
        let mut model = Self {
            mode: config.mode,
            registry,
            encoder,
            embedding,
            layer_units: config.layer_units.clone(),
            ctr_domain_features: config.ctr_domain_features,
            ctr: None,
            base: Tower::new(ParamSet::zeros(&TowerArchitecture::new(1, vec![1])?)),
            types: Vec::new(),
            scenarios: Vec::new(),
            step: 0,
            stats: RoutingStats::default(),
        };
        let cvr_arch = model.cvr_architecture()?;
        if let Some(ctr_arch) = model.ctr_architecture()? {
            model.ctr = Some(Tower::new(ParamSet::he_uniform(&ctr_arch, &mut rng)));
        }
        model.base = Tower::new(ParamSet::he_uniform(&cvr_arch, &mut rng));
        if config.mode.has_domain_params() {
            let zero = Tower::new(ParamSet::zeros(&cvr_arch));
            model.types = vec![zero.clone(); model.registry.num_types()];
            model.scenarios = vec![zero; model.registry.num_scenarios()];
        }
        Ok(model)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        mode: ModelMode,
        registry: DomainRegistry,
        encoder: FeatureEncoder,
        embedding: EmbeddingTable,
        layer_units: Vec<usize>,
        ctr_domain_features: bool,
        towers: (Option<Tower>, Tower, Vec<Tower>, Vec<Tower>),
        step: u64,
    ) -> Result<Self> {
        let (ctr, base, types, scenarios) = towers;
        let model = Self {
            mode,
            registry,
            encoder,
            embedding,
            layer_units,
            ctr_domain_features,
            ctr,
            base,
            types,
            scenarios,
            step,
            stats: RoutingStats::default(),
        };
        let cvr = ParamSet::zeros(&model.cvr_architecture()?);
        let ok_cvr = |t: &Tower| t.params.same_shape(&cvr) && t.accum.same_shape(&cvr);
        let ctr_ok = match (&model.ctr, model.ctr_architecture()?) {
            (Some(t), Some(a)) => {
                let z = ParamSet::zeros(&a);
                t.params.same_shape(&z) && t.accum.same_shape(&z)
            }
            (None, None) => true,
            _ => false,
        };
        let domain_ok = if mode.has_domain_params() {
            model.types.len() == model.registry.num_types()
                && model.scenarios.len() == model.registry.num_scenarios()
        } else {
            model.types.is_empty() && model.scenarios.is_empty()
        };
        if !ok_cvr(&model.base)
            || !model.types.iter().chain(&model.scenarios).all(ok_cvr)
            || !ctr_ok
            || !domain_ok
            || model.embedding.num_slots() != model.encoder.num_slots
        {
            return Err(Error::Checkpoint("parameter shapes inconsistent with header".into()));
        }
        Ok(model)
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn registry(&self) -> &DomainRegistry {
        &self.registry
    }

    pub fn schema(&self) -> &Schema {
        &self.encoder.schema
    }

    pub fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.dim()
    }

    pub fn layer_units(&self) -> &[usize] {
        &self.layer_units
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn stats(&self) -> &RoutingStats {
        &self.stats
    }

    pub fn ctr_tower(&self) -> Option<&Tower> {
        self.ctr.as_ref()
    }

    pub fn base_tower(&self) -> &Tower {
        &self.base
    }

    pub fn type_tower(&self, t: usize) -> Option<&Tower> {
        self.types.get(t)
    }

    pub fn scenario_tower(&self, s: usize) -> Option<&Tower> {
        self.scenarios.get(s)
    }

    pub fn type_towers(&self) -> &[Tower] {
        &self.types
    }

    pub fn scenario_towers(&self) -> &[Tower] {
        &self.scenarios
    }

    /// Stored CVR parameter sets: `N_t + N_s + 1` with domain parameters,
    /// otherwise one.
    pub fn parameter_set_count(&self) -> usize {
        if self.mode.has_domain_params() {
            network::stored_param_sets(self.registry.num_types(), self.registry.num_scenarios())
        } else {
            1
        }
    }

    /// Distinct CVR towers the stored sets can form.
    pub fn composable_tower_count(&self) -> usize {
        if self.mode.has_domain_params() {
            network::composable_towers(self.registry.num_types(), self.registry.num_scenarios())
        } else {
            1
        }
    }

    fn cvr_domain_fields(&self) -> bool {
        self.mode.domain_features()
    }

    fn ctr_domain_fields(&self) -> bool {
        self.mode.domain_features() || self.ctr_domain_features
    }

    fn input_dim(&self, domain_fields: bool) -> usize {
        (self.encoder.schema.len() + if domain_fields { 2 } else { 0 }) * self.embedding.dim()
    }

    pub fn cvr_architecture(&self) -> Result<TowerArchitecture> {
        TowerArchitecture::new(self.input_dim(self.cvr_domain_fields()), self.layer_units.clone())
    }

    pub fn ctr_architecture(&self) -> Result<Option<TowerArchitecture>> {
        if !self.mode.has_ctr_tower() {
            return Ok(None);
        }
        TowerArchitecture::new(self.input_dim(self.ctr_domain_fields()), self.layer_units.clone()).map(Some)
    }

    fn input_slots(inst: &Instance, domain_fields: bool) -> impl Iterator<Item = usize> + '_ {
        let extra: &[usize] = if domain_fields { &inst.domain_slots } else { &[] };
        inst.slots.iter().copied().chain(extra.iter().copied())
    }

    fn build_input(&self, instances: &[Instance], domain_fields: bool) -> Matrix {
        let cols = self.input_dim(domain_fields);
        let mut data = Vec::with_capacity(instances.len() * cols);
        for inst in instances {
            for slot in Self::input_slots(inst, domain_fields) {
                data.extend_from_slice(self.embedding.row(slot));
            }
        }
        Matrix::new(instances.len(), cols, data).expect("input width matches schema")
    }

    /// CVR parameters of `domain`: `base + type + scenario` with domain
    /// parameters, the shared set otherwise.
    pub fn tower_params(&self, domain: DomainId) -> Result<ParamSet> {
        if !self.registry.contains(domain) {
            return Err(Error::DomainIndex(format!("{domain:?}")));
        }
        self.stats.compositions.fetch_add(1, Ordering::Relaxed);
        if self.mode.has_domain_params() {
            Ok(network::compose(
                &self.base.params,
                &self.types[domain.type_idx].params,
                &self.scenarios[domain.scenario_idx].params,
            )?
            .into_params())
        } else {
            Ok(network::ComposedTowerParams::shared(&self.base.params).into_params())
        }
    }

    fn shared_params(&self) -> ParamSet {
        self.stats.compositions.fetch_add(1, Ordering::Relaxed);
        self.base.params.clone()
    }

    fn routes(&self, masks: &BatchMasks) -> Vec<Route> {
        if self.mode.has_domain_params() {
            masks
                .groups()
                .iter()
                .map(|g| Route {
                    domain: Some(g.domain),
                    rows: g.rows.clone(),
                })
                .collect()
        } else {
            vec![Route {
                domain: None,
                rows: (0..masks.batch_size()).collect(),
            }]
        }
    }

    fn run_routes(&self, x: &Matrix, masks: &BatchMasks) -> Result<(Vec<f64>, Vec<RouteOutput>)> {
        let mut logits = vec![0.0; x.rows()];
        let mut outputs = Vec::new();
        for route in self.routes(masks) {
            let params = match route.domain {
                Some(d) => self.tower_params(d)?,
                None => self.shared_params(),
            };
            let sub = if route.rows.len() == x.rows() {
                x.clone()
            } else {
                x.select_rows(&route.rows)
            };
            self.stats.forwards.fetch_add(1, Ordering::Relaxed);
            let (h, cache) = network::forward(&sub, &params)?;
            for (&r, &v) in route.rows.iter().zip(&h) {
                logits[r] = v;
            }
            outputs.push(RouteOutput {
                domain: route.domain,
                rows: route.rows,
                params,
                cache,
            });
        }
        Ok((logits, outputs))
    }

    fn ctr_logits(&self, instances: &[Instance]) -> Result<Option<(Vec<f64>, ForwardCache)>> {
        match &self.ctr {
            Some(t) => {
                let x = self.build_input(instances, self.ctr_domain_fields());
                network::forward(&x, &t.params).map(Some)
            }
            None => Ok(None),
        }
    }

    /// Scores a mixed-domain batch: each instance's CVR comes from its own
    /// domain's tower.
    pub fn predict_batch(&self, batch: &MiniBatch) -> Result<BatchPrediction> {
        self.predict_with_masks(&batch.instances, &batch.masks)
    }

    pub fn predict_instances(&self, instances: &[Instance]) -> Result<BatchPrediction> {
        let ids: Vec<DomainId> = instances.iter().map(|i| i.domain).collect();
        let masks = compute_masks(&ids, &self.registry)?;
        self.predict_with_masks(instances, &masks)
    }

    fn predict_with_masks(&self, instances: &[Instance], masks: &BatchMasks) -> Result<BatchPrediction> {
        let p_ctr = self
            .ctr_logits(instances)?
            .map(|(g, _)| g.into_iter().map(sigmoid).collect());
        let x = self.build_input(instances, self.cvr_domain_fields());
        let (h, _) = self.run_routes(&x, masks)?;
        Ok(BatchPrediction {
            p_ctr,
            p_cvr: h.into_iter().map(sigmoid).collect(),
        })
    }

    /// Reference form of batch routing: every non-empty domain tower scores
    /// the whole batch and the outputs are combined as
    /// `Σ_d m_d ⊙ p_d`.
    pub fn predict_batch_masked(&self, batch: &MiniBatch) -> Result<BatchPrediction> {
        let n = batch.len();
        let p_ctr = self
            .ctr_logits(&batch.instances)?
            .map(|(g, _)| g.into_iter().map(sigmoid).collect());
        let x = self.build_input(&batch.instances, self.cvr_domain_fields());
        let mut combined = Matrix::zeros(1, n);
        if self.mode.has_domain_params() {
            for g in batch.masks.groups() {
                let params = self.tower_params(g.domain)?;
                self.stats.forwards.fetch_add(1, Ordering::Relaxed);
                let p = Matrix::row_vector(network::forward_logits(&x, &params)?.into_iter().map(sigmoid).collect());
                let mask = Matrix::row_vector(g.mask.clone());
                combined.add_assign(&mask.hadamard(&p)?)?;
            }
        } else {
            let params = self.shared_params();
            self.stats.forwards.fetch_add(1, Ordering::Relaxed);
            combined = Matrix::row_vector(network::forward_logits(&x, &params)?.into_iter().map(sigmoid).collect());
        }
        Ok(BatchPrediction {
            p_ctr,
            p_cvr: combined.into_data(),
        })
    }

    /// Serving path: composes exactly one tower for the instance's domain.
    pub fn predict_one(&self, x: &FeatureVector) -> Result<Prediction> {
        let inst = self.encoder.encode(x, &self.registry)?;
        self.predict_instance(&inst)
    }

    pub fn predict_instance(&self, inst: &Instance) -> Result<Prediction> {
        let one = std::slice::from_ref(inst);
        let p_ctr = self.ctr_logits(one)?.map(|(g, _)| sigmoid(g[0]));
        let x = self.build_input(one, self.cvr_domain_fields());
        let params = if self.mode.has_domain_params() {
            self.tower_params(inst.domain)?
        } else {
            if !self.registry.contains(inst.domain) {
                return Err(Error::DomainIndex(format!("{:?}", inst.domain)));
            }
            self.shared_params()
        };
        self.stats.forwards.fetch_add(1, Ordering::Relaxed);
        let h = network::forward_logits(&x, &params)?;
        Ok(Prediction {
            p_ctr,
            p_cvr: sigmoid(h[0]),
        })
    }

    fn scatter_input_grads(
        &self,
        grads: &mut BTreeMap<usize, Vec<f64>>,
        instances: &[Instance],
        rows: &[usize],
        d_input: &Matrix,
        domain_fields: bool,
    ) {
        let dim = self.embedding.dim();
        for (sub_row, &r) in rows.iter().enumerate() {
            let d_row = d_input.row(sub_row);
            for (k, slot) in Self::input_slots(&instances[r], domain_fields).enumerate() {
                let g = grads.entry(slot).or_insert_with(|| vec![0.0; dim]);
                for (a, &b) in g.iter_mut().zip(&d_row[k * dim..(k + 1) * dim]) {
                    *a += b;
                }
            }
        }
    }

    /// Loss of `batch` and the gradient of `loss_ctr + α · loss_ctcvr` (with
    /// the mode's weighting) w.r.t. every parameter. For `dnn` the loss is
    /// the CVR cross-entropy over clicked instances.
    pub fn loss_and_gradients(&self, batch: &MiniBatch, alpha: f64) -> Result<(LossBreakdown, ModelGradients)> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let nf = n as f64;
        let y = batch.clicks();
        let z = batch.conversions();
        let ctr = self.ctr_logits(&batch.instances)?;
        let x = self.build_input(&batch.instances, self.cvr_domain_fields());
        let (h, routes) = self.run_routes(&x, &batch.masks)?;
        let r: Vec<f64> = h.iter().map(|&v| sigmoid(v)).collect();

        let mut dg = vec![0.0; n];
        let mut dh = vec![0.0; n];
        let breakdown = match &ctr {
            Some((g, _)) => {
                let p: Vec<f64> = g.iter().map(|&v| sigmoid(v)).collect();
                let ctr_losses = loss::ctr_instance_losses(&p, &y);
                let ctcvr_losses = loss::ctcvr_instance_losses(&p, &r, &y, &z);
                let weighting = self.mode.weighting();
                let bd = loss::breakdown(&ctr_losses, &ctcvr_losses, &batch.masks, weighting, alpha);
                for i in 0..n {
                    let w = match weighting {
                        Weighting::Dynamic => batch.weights[i],
                        Weighting::None => 1.0,
                    };
                    let (cg, ch) = loss::ctcvr_logit_grads(p[i], r[i], y[i] * z[i]);
                    let scale = alpha * w / nf;
                    dg[i] = loss::ctr_logit_grad(p[i], y[i]) / nf + scale * cg;
                    dh[i] = scale * ch;
                }
                bd
            }
            None => {
                let clicked: Vec<usize> = (0..n).filter(|&i| batch.instances[i].click).collect();
                let mut losses = vec![0.0; n];
                for &i in &clicked {
                    losses[i] = loss::binary_cross_entropy(r[i], z[i]);
                    dh[i] = loss::ctr_logit_grad(r[i], z[i]) / clicked.len() as f64;
                }
                let cvr = if clicked.is_empty() {
                    0.0
                } else {
                    clicked.iter().map(|&i| losses[i]).sum::<f64>() / clicked.len() as f64
                };
                LossBreakdown {
                    ctr: 0.0,
                    ctcvr: cvr,
                    ctcvr_weighted: cvr,
                    total: cvr,
                    alpha,
                    per_domain_ctcvr: loss::per_domain_means(&losses, &batch.masks),
                }
            }
        };

        let mut emb = BTreeMap::new();
        let ctr_grads = match (&ctr, &self.ctr) {
            (Some((_, cache)), Some(tower)) => {
                let tg = network::backward(cache, &tower.params, &dg)?;
                let all: Vec<usize> = (0..n).collect();
                self.scatter_input_grads(&mut emb, &batch.instances, &all, &tg.input, self.ctr_domain_fields());
                Some(tg.params)
            }
            _ => None,
        };

        let mut base = ParamSet::zeros(&self.cvr_architecture()?);
        let mut types: BTreeMap<usize, ParamSet> = BTreeMap::new();
        let mut scenarios: BTreeMap<usize, ParamSet> = BTreeMap::new();
        for route in &routes {
            let d_sub: Vec<f64> = route.rows.iter().map(|&i| dh[i]).collect();
            let tg = network::backward(&route.cache, &route.params, &d_sub)?;
            self.scatter_input_grads(&mut emb, &batch.instances, &route.rows, &tg.input, self.cvr_domain_fields());
            base.add_assign(&tg.params)?;
            if let Some(d) = route.domain {
                match types.get_mut(&d.type_idx) {
                    Some(acc) => acc.add_assign(&tg.params)?,
                    None => {
                        types.insert(d.type_idx, tg.params.clone());
                    }
                }
                match scenarios.get_mut(&d.scenario_idx) {
                    Some(acc) => acc.add_assign(&tg.params)?,
                    None => {
                        scenarios.insert(d.scenario_idx, tg.params);
                    }
                }
            }
        }
        Ok((
            breakdown,
            ModelGradients {
                embedding: emb,
                ctr: ctr_grads,
                base,
                types,
                scenarios,
            },
        ))
    }

    pub fn loss(&self, batch: &MiniBatch, alpha: f64) -> Result<LossBreakdown> {
        self.loss_and_gradients(batch, alpha).map(|(l, _)| l)
    }

    /// One Adagrad step on `batch`. Only looked-up embedding rows, the CTR
    /// tower, the shared set and the type/scenario sets present in the batch
    /// are updated.
    pub fn train_step(&mut self, batch: &MiniBatch, params: &TrainParams) -> Result<LossBreakdown> {
        let (bd, grads) = self.loss_and_gradients(batch, params.alpha)?;
        if !bd.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("ctr={} ctcvr={} total={}", bd.ctr, bd.ctcvr, bd.total),
            });
        }
        self.apply_gradients(&grads, &params.optimizer)?;
        self.step += 1;
        Ok(bd)
    }

    pub fn apply_gradients(&mut self, grads: &ModelGradients, opt: &Adagrad) -> Result<()> {
        for (&slot, g) in &grads.embedding {
            let (w, a) = self.embedding.row_and_accum_mut(slot);
            opt.step(w, g, a);
        }
        if let (Some(t), Some(g)) = (self.ctr.as_mut(), grads.ctr.as_ref()) {
            t.apply(g, opt)?;
        }
        self.base.apply(&grads.base, opt)?;
        for (&t, g) in &grads.types {
            self.types[t].apply(g, opt)?;
        }
        for (&s, g) in &grads.scenarios {
            self.scenarios[s].apply(g, opt)?;
        }
        Ok(())
    }

    /// Parameter groups present in this model.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut groups = vec![ParamGroup::Embedding];
        if self.ctr.is_some() {
            groups.push(ParamGroup::Ctr);
        }
        groups.push(ParamGroup::Base);
        groups.extend((0..self.types.len()).map(ParamGroup::Type));
        groups.extend((0..self.scenarios.len()).map(ParamGroup::Scenario));
        groups
    }

    fn group_set(&self, group: ParamGroup) -> Option<&ParamSet> {
        match group {
            ParamGroup::Embedding => None,
            ParamGroup::Ctr => self.ctr.as_ref().map(|t| &t.params),
            ParamGroup::Base => Some(&self.base.params),
            ParamGroup::Type(t) => self.types.get(t).map(|t| &t.params),
            ParamGroup::Scenario(s) => self.scenarios.get(s).map(|t| &t.params),
        }
    }

    fn group_set_mut(&mut self, group: ParamGroup) -> Option<&mut ParamSet> {
        match group {
            ParamGroup::Embedding => None,
            ParamGroup::Ctr => self.ctr.as_mut().map(|t| &mut t.params),
            ParamGroup::Base => Some(&mut self.base.params),
            ParamGroup::Type(t) => self.types.get_mut(t).map(|t| &mut t.params),
            ParamGroup::Scenario(s) => self.scenarios.get_mut(s).map(|t| &mut t.params),
        }
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Embedding => self.embedding.weights().data().len(),
            g => self.group_set(g).map_or(0, ParamSet::num_params),
        }
    }

    pub fn param(&self, group: ParamGroup, idx: usize) -> f64 {
        match group {
            ParamGroup::Embedding => self.embedding.weights().data()[idx],
            g => self.group_set(g).expect("group present").get(idx),
        }
    }

    pub fn set_param(&mut self, group: ParamGroup, idx: usize, value: f64) {
        match group {
            ParamGroup::Embedding => {
                let dim = self.embedding.dim();
                self.embedding.row_mut(idx / dim)[idx % dim] = value;
            }
            g => self.group_set_mut(g).expect("group present").set(idx, value),
        }
    }

    /// Mutable access to the CVR parameter set of a group (not embedding).
    pub fn params_mut(&mut self, group: ParamGroup) -> Option<&mut ParamSet> {
        self.group_set_mut(group)
    }

    /// Encodes log records against this model's schema and registry.
    pub fn encode(&self, records: &[FeatureVector]) -> Result<Vec<Instance>> {
        self.encoder.encode_all(records, &self.registry)
    }
}
