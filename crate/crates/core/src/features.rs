//! Feature hashing, the shared embedding table and instance encoding.

use crate::domains::{DomainId, DomainRegistry};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngState};

const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
const FNV_PRIME: u64 = 1_099_511_628_211;

/// Pseudo-field names used when the domain codes are fed as plain features.
pub const TYPE_FIELD: &str = "__type";
pub const SCENARIO_FIELD: &str = "__scenario";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Slot of `field=value` in a table of `num_slots` rows.
pub fn hash_feature(field: &str, value: &str, num_slots: usize) -> usize {
    assert!(num_slots > 0, "num_slots must be positive");
    let mut h = FNV_OFFSET_BASIS;
    for &b in field.as_bytes().iter().chain(b"=").chain(value.as_bytes()) {
        h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
    }
    (h % num_slots as u64) as usize
}

/// Ordered field names of a conversion log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    fields: Vec<String>,
}

impl Schema {
    pub fn new<S: Into<String>>(fields: impl IntoIterator<Item = S>) -> Result<Self> {
        let fields: Vec<String> = fields.into_iter().map(Into::into).collect();
        for (i, f) in fields.iter().enumerate() {
            if f.is_empty() || f.contains(['\t', '\n', ',']) {
                return Err(Error::Config(format!("invalid field name {f:?}")));
            }
            if fields[..i].contains(f) {
                return Err(Error::Config(format!("duplicate field name {f:?}")));
            }
        }
        Ok(Self { fields })
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// One impression as it appears in a log: raw field values plus its
/// conversion type, display scenario and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    /// Values in schema order.
    pub values: Vec<String>,
    pub type_code: String,
    pub scenario_code: String,
    pub click: bool,
    pub conversion: bool,
}

impl FeatureVector {
    pub fn new(
        values: Vec<String>,
        type_code: impl Into<String>,
        scenario_code: impl Into<String>,
        click: bool,
        conversion: bool,
    ) -> Result<Self> {
        if conversion && !click {
            return Err(Error::Config("conversion without click".into()));
        }
        Ok(Self {
            values,
            type_code: type_code.into(),
            scenario_code: scenario_code.into(),
            click,
            conversion,
        })
    }

    /// `(field, value)` pairs in schema order.
    pub fn field_values<'a>(&'a self, schema: &'a Schema) -> impl Iterator<Item = (&'a str, &'a str)> {
        schema
            .fields()
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(String::as_str))
    }
}

/// A [`FeatureVector`] with every value hashed to its embedding slot and
/// domain codes resolved against a registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub slots: Vec<usize>,
    /// Slots of the `__type` / `__scenario` pseudo-fields.
    pub domain_slots: [usize; 2],
    pub domain: DomainId,
    pub click: bool,
    pub conversion: bool,
}

impl Instance {
    pub fn y(&self) -> f64 {
        if self.click {
            1.0
        } else {
            0.0
        }
    }

    pub fn z(&self) -> f64 {
        if self.conversion {
            1.0
        } else {
            0.0
        }
    }
}

/// Hashes feature vectors into [`Instance`]s.
#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub schema: Schema,
    pub num_slots: usize,
}

impl FeatureEncoder {
    pub fn new(schema: Schema, num_slots: usize) -> Result<Self> {
        if num_slots == 0 {
            return Err(Error::Config("num_slots must be positive".into()));
        }
        Ok(Self { schema, num_slots })
    }

    pub fn encode(&self, fv: &FeatureVector, registry: &DomainRegistry) -> Result<Instance> {
        if fv.values.len() != self.schema.len() {
            return Err(Error::Shape(format!(
                "expected {} field values, got {}",
                self.schema.len(),
                fv.values.len()
            )));
        }
        let domain = registry.domain_of(&fv.type_code, &fv.scenario_code)?;
        let slots = fv
            .field_values(&self.schema)
            .map(|(f, v)| hash_feature(f, v, self.num_slots))
            .collect();
        Ok(Instance {
            slots,
            domain_slots: [
                hash_feature(TYPE_FIELD, &fv.type_code, self.num_slots),
                hash_feature(SCENARIO_FIELD, &fv.scenario_code, self.num_slots),
            ],
            domain,
            click: fv.click,
            conversion: fv.conversion,
        })
    }

    pub fn encode_all(&self, records: &[FeatureVector], registry: &DomainRegistry) -> Result<Vec<Instance>> {
        records.iter().map(|r| self.encode(r, registry)).collect()
    }
}

/// Hashed embedding table shared by every tower, with its Adagrad
/// accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    weights: Matrix,
    accum: Matrix,
}

impl EmbeddingTable {
    pub fn zeros(num_slots: usize, dim: usize) -> Self {
        assert!(num_slots > 0 && dim > 0);
        Self {
            weights: Matrix::zeros(num_slots, dim),
            accum: Matrix::zeros(num_slots, dim),
        }
    }

    /// Uniform in `[-0.05, 0.05]`.
    pub fn random(num_slots: usize, dim: usize, rng: &mut RngState) -> Self {
        let mut table = Self::zeros(num_slots, dim);
        for w in table.weights.data_mut() {
            *w = rng.uniform(-0.05, 0.05);
        }
        table
    }

    pub(crate) fn from_parts(weights: Matrix, accum: Matrix) -> Result<Self> {
        if weights.shape() != accum.shape() || weights.cols() == 0 {
            return Err(Error::Shape("embedding weights/accumulator shape".into()));
        }
        Ok(Self { weights, accum })
    }

    pub fn num_slots(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        self.weights.row(slot)
    }

    pub fn row_mut(&mut self, slot: usize) -> &mut [f64] {
        self.weights.row_mut(slot)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn accumulators(&self) -> &Matrix {
        &self.accum
    }

    pub(crate) fn row_and_accum_mut(&mut self, slot: usize) -> (&mut [f64], &mut [f64]) {
        (self.weights.row_mut(slot), self.accum.row_mut(slot))
    }

    /// Concatenates the rows of `slots`, in order, into `out`.
    pub fn embed_into(&self, slots: &[usize], out: &mut Vec<f64>) {
        for &s in slots {
            out.extend_from_slice(self.row(s));
        }
    }

    pub fn embed_slots(&self, slots: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(slots.len() * self.dim());
        self.embed_into(slots, &mut out);
        out
    }
}

/// The concatenated embedding of one impression's schema fields. Domain
/// codes are not part of it.
pub fn embed(instance: &FeatureVector, schema: &Schema, table: &EmbeddingTable) -> Vec<f64> {
    let slots: Vec<usize> = instance
        .field_values(schema)
        .map(|(f, v)| hash_feature(f, v, table.num_slots()))
        .collect();
    table.embed_slots(&slots)
}
