//! Training, the Laplace posterior of the output layer, and prediction
//! with fallback.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{FeatureMode, Features, FeaturizerConfig, FeaturizerState};
use super::labels::{LabelMatrix, LabelParams};
use super::nn::{sigmoid, weighted_bce, Adam, Network, NetworkShape};
use crate::dataset::{ExecutionDataset, LatencyTable, Provenance};
use crate::error::{Error, Result};
use crate::jsonl::FORMAT_VERSION;
use crate::plan::PlanFingerprint;
use crate::simdb::Schema;
use crate::types::QueryInstance;

/// Predicted probabilities are capped just below one so that a threshold
/// of exactly 1.0 always falls back.
pub const CONFIDENCE_CAP: f64 = 1.0 - 1e-9;

const MEAN_FIELD: f64 = std::f64::consts::PI / 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tau: f64,
    pub regression_weight: f64,
    pub improvement_weight: f64,
    pub threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub residual: bool,
    pub spectral_bound: f64,
    pub power_iterations: usize,
    pub rff_dim: usize,
    pub length_scale: f64,
    pub embedding_dim: usize,
    pub vocabulary_size: usize,
    pub oov_buckets: usize,
    pub feature_mode: FeatureMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tau: 0.05,
            regression_weight: 5.0,
            improvement_weight: 0.5,
            threshold: 0.9,
            epochs: 500,
            batch_size: 32,
            learning_rate: 3e-4,
            hidden_units: 64,
            hidden_layers: 3,
            residual: true,
            spectral_bound: 0.95,
            power_iterations: 1,
            rff_dim: 128,
            length_scale: 1.0,
            embedding_dim: 10,
            vocabulary_size: 32,
            oov_buckets: 4,
            feature_mode: FeatureMode::Values,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.label_params().validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must be in [0, 1], got {}", self.threshold));
        }
        if self.batch_size == 0 || self.hidden_units == 0 || self.hidden_layers == 0 || self.rff_dim == 0 {
            return bad("batch size, layer sizes and random features must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.spectral_bound > 0.0) || !(self.length_scale > 0.0) {
            return bad("learning rate, spectral bound and length scale must be positive".into());
        }
        if self.embedding_dim == 0 || self.vocabulary_size == 0 {
            return bad("embedding dimension and vocabulary size must be positive".into());
        }
        Ok(())
    }

    pub fn label_params(&self) -> LabelParams {
        LabelParams { tau: self.tau, regression_weight: self.regression_weight, improvement_weight: self.improvement_weight }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..16])
    }
}

/// A trained per-template predictor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u64,
    pub kind: String,
    pub template_id: String,
    /// One output head per plan, in plan-cover order.
    pub heads: Vec<PlanFingerprint>,
    pub featurizer: FeaturizerState,
    pub network: Network,
    /// Per-head posterior precision of the output weights, row-major.
    pub precision: Vec<Vec<f64>>,
    pub threshold: f64,
    pub config: ModelConfig,
    pub config_digest: String,
    pub seed: u64,
    /// Set by the caller that owns the wider configuration.
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(skip)]
    covariance: Vec<DMatrix<f64>>,
}

const KIND: &str = "model";

/// Loss curve and label statistics of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub examples: usize,
    pub heads: usize,
    /// Mean weighted loss over the training set before training and after
    /// each epoch.
    pub losses: Vec<f64>,
    pub positive_fraction: f64,
    /// Largest spectral norm estimate seen after any normalization.
    pub max_spectral_norm: f64,
}

/// Decision for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanChoice {
    /// `None` means fall back to the optimizer's default plan.
    pub plan: Option<PlanFingerprint>,
    /// Confidence of the top-ranked head.
    pub confidence: f64,
}

impl PlanChoice {
    pub fn fallback(&self) -> bool {
        self.plan.is_none()
    }
}

/// Per-head GP output for one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadScore {
    pub mean: f64,
    pub variance: f64,
    pub confidence: f64,
}

/// One training example: input features, labels and weights.
pub struct Example {
    pub features: Features,
    pub labels: Vec<bool>,
    pub weights: Vec<f64>,
}

/// Mean weighted loss over `examples` and its gradient.
pub fn loss_and_grad(net: &Network, examples: &[&Example]) -> (f64, super::nn::Grads) {
    let mut g = net.zero_grads();
    let mut total = 0.0;
    let heads = net.shape.heads.max(1);
    let norm = 1.0 / (examples.len().max(1) * heads) as f64;
    for ex in examples {
        let t = net.forward(&ex.features);
        let (l, mut dz) = weighted_bce(&t.logits, &ex.labels, &ex.weights);
        total += l;
        dz.iter_mut().for_each(|d| *d *= norm);
        net.backward(&ex.features, &t, &dz, &mut g);
    }
    (total * norm, g)
}

fn mean_loss(net: &Network, examples: &[Example]) -> f64 {
    let refs: Vec<&Example> = examples.iter().collect();
    let heads = net.shape.heads.max(1);
    let norm = 1.0 / (refs.len().max(1) * heads) as f64;
    refs.iter()
        .map(|ex| weighted_bce(&net.forward(&ex.features).logits, &ex.labels, &ex.weights).0)
        .sum::<f64>()
        * norm
}

/// Trains a predictor on the `train` instances of `ds` with one head per
/// `heads` plan. `schema` is needed only for selectivity features.
/// Power iterations for the freshly initialized weights, before the
/// persistent estimates have had a chance to converge.
const WARMUP_POWER_ITERATIONS: usize = 200;

pub fn train_model(
    ds: &ExecutionDataset,
    heads: &[PlanFingerprint],
    train: &[usize],
    config: &ModelConfig,
    seed: u64,
    schema: Option<&Schema>,
) -> Result<(ModelArtifact, TrainReport)> {
    config.validate()?;
    if heads.is_empty() {
        return Err(Error::Training("empty plan cover".into()));
    }
    if train.is_empty() {
        return Err(Error::Training("no training instances".into()));
    }
    let table = LatencyTable::from_dataset(ds)?;
    let labels = LabelMatrix::build(&table, train, heads, &config.label_params())?;
    let featurizer = FeaturizerState::fit(
        &ds.template,
        &ds.instances,
        &table,
        train,
        &FeaturizerConfig {
            mode: config.feature_mode,
            vocabulary_size: config.vocabulary_size,
            oov_buckets: config.oov_buckets,
            embedding_dim: config.embedding_dim,
        },
        schema,
    )?;
    let examples: Vec<Example> = train
        .iter()
        .zip(labels.labels.into_iter().zip(labels.weights))
        .map(|(&i, (l, w))| Ok(Example { features: featurizer.transform(&ds.instances[i])?, labels: l, weights: w }))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetworkShape {
        dense_inputs: featurizer.dense_dim(),
        embeddings: featurizer.embeddings(),
        hidden_units: config.hidden_units,
        hidden_layers: config.hidden_layers,
        residual: config.residual,
        rff_dim: config.rff_dim,
        length_scale: config.length_scale,
        heads: heads.len(),
    };
    let mut net = Network::new(shape, &mut rng);
    let mut max_sigma: f64 = 0.0;
    for s in net.constrain(config.spectral_bound, WARMUP_POWER_ITERATIONS) {
        max_sigma = max_sigma.max(s);
    }
    let mut adam = Adam::new(config.learning_rate, &net.zero_grads());
    let mut losses = vec![mean_loss(&net, &examples)];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let refs: Vec<&Example> = batch.iter().map(|&k| &examples[k]).collect();
            let (_, g) = loss_and_grad(&net, &refs);
            adam.step(net.params_mut(), &g);
            for s in net.constrain(config.spectral_bound, config.power_iterations) {
                max_sigma = max_sigma.max(s);
            }
        }
        let l = mean_loss(&net, &examples);
        if !l.is_finite() {
            return Err(Error::Training("loss diverged".into()));
        }
        losses.push(l);
    }

    let d = config.rff_dim;
    let mut precision: Vec<DMatrix<f64>> = vec![DMatrix::identity(d, d); heads.len()];
    for ex in &examples {
        let t = net.forward(&ex.features);
        let phi = nalgebra::DVector::from_column_slice(&t.phi);
        let outer = &phi * phi.transpose();
        for (k, p) in precision.iter_mut().enumerate() {
            let s = sigmoid(t.logits[k]);
            *p += &outer * (s * (1.0 - s));
        }
    }
    let positives = examples.iter().flat_map(|e| &e.labels).filter(|&&b| b).count();
    let report = TrainReport {
        examples: examples.len(),
        heads: heads.len(),
        losses,
        positive_fraction: positives as f64 / (examples.len() * heads.len()) as f64,
        max_spectral_norm: max_sigma,
    };
    let mut model = ModelArtifact {
        format_version: FORMAT_VERSION,
        kind: KIND.to_string(),
        template_id: ds.template.template_id().to_string(),
        heads: heads.to_vec(),
        featurizer,
        network: net,
        precision: precision.iter().map(|p| p.as_slice().to_vec()).collect(),
        threshold: config.threshold,
        config: config.clone(),
        config_digest: config.digest(),
        seed,
        provenance: Provenance { seed, config_digest: String::new() },
        covariance: Vec::new(),
    };
    model.prepare()?;
    Ok((model, report))
}

impl ModelArtifact {
    /// Inverts the stored precision matrices.
    fn prepare(&mut self) -> Result<()> {
        let d = self.network.shape.rff_dim;
        if self.precision.len() != self.heads.len() || self.network.shape.heads != self.heads.len() {
            return Err(Error::Training("head count does not match the plan list".into()));
        }
        self.covariance = self
            .precision
            .iter()
            .map(|p| {
                if p.len() != d * d {
                    return Err(Error::Training("precision matrix has the wrong size".into()));
                }
                DMatrix::from_column_slice(d, d, p)
                    .cholesky()
                    .map(|c| c.inverse())
                    .ok_or_else(|| Error::Training("precision matrix is not positive definite".into()))
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn scores(&self, instance: &QueryInstance) -> Result<Vec<HeadScore>> {
        if instance.template_id != self.template_id {
            return Err(Error::InvalidInstance(format!(
                "instance of template `{}` given to the model of `{}`",
                instance.template_id, self.template_id
            )));
        }
        let f = self.featurizer.transform(instance)?;
        Ok(self.scores_of(&f))
    }

    pub fn scores_of(&self, f: &Features) -> Vec<HeadScore> {
        let t = self.network.forward(f);
        let phi = nalgebra::DVector::from_column_slice(&t.phi);
        t.logits
            .iter()
            .zip(&self.covariance)
            .map(|(&mean, cov)| {
                let variance = phi.dot(&(cov * &phi)).max(0.0);
                let confidence = sigmoid(mean / (1.0 + MEAN_FIELD * variance).sqrt()).clamp(0.0, CONFIDENCE_CAP);
                HeadScore { mean, variance, confidence }
            })
            .collect()
    }

    pub fn predict(&self, instance: &QueryInstance) -> Result<PlanChoice> {
        self.predict_with_threshold(instance, self.threshold)
    }

    /// Most confident head, or fallback below `threshold`. Ties go to the
    /// earlier head.
    pub fn predict_with_threshold(&self, instance: &QueryInstance, threshold: f64) -> Result<PlanChoice> {
        Ok(choose(&self.heads, &self.scores(instance)?, threshold))
    }

    pub fn to_writer<W: Write>(&self, out: &mut W) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn from_reader<R: std::io::Read>(input: R) -> Result<Self> {
        let mut m: ModelArtifact = serde_json::from_reader(input)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion { found: m.format_version, expected: FORMAT_VERSION });
        }
        if m.kind != KIND {
            return Err(Error::format(1, format!("expected a `{KIND}` file, found `{}`", m.kind)));
        }
        m.prepare()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.to_writer(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Picks the most confident head or falls back.
pub fn choose(heads: &[PlanFingerprint], scores: &[HeadScore], threshold: f64) -> PlanChoice {
    let mut best: Option<(usize, f64)> = None;
    for (k, s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, c)| s.confidence > c) {
            best = Some((k, s.confidence));
        }
    }
    match best {
        Some((k, c)) if c >= threshold => PlanChoice { plan: Some(heads[k].clone()), confidence: c },
        Some((_, c)) => PlanChoice { plan: None, confidence: c },
        None => PlanChoice { plan: None, confidence: 0.0 },
    }
}
