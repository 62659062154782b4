//! Training objectives, masking, the optimizer, and the epoch loop.

mod losses;
mod masking;
mod optim;

pub use losses::{att_loss, cmlm_loss, joint_ar_loss, joint_nar_loss};
pub use masking::{apply_training_masks, sample_mask_count};
pub use optim::{optimizer_step, AdamConfig, TrainState, WarmupSchedule};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::ctc::{ctc_greedy, ctc_log_prob_var};
use crate::error::{Error, Result};
use crate::harness::metrics::edit_distance;
use crate::model::{Bound, Dropout, Model, ModelConfig, ModelType};
use crate::numerics::{Graph, Rng, Scalar, Tensor, Var};

/// Everything a training run reads from its config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model_type: ModelType,
    /// CTC weight in the joint CTC-attention loss.
    pub lambda_ar: f64,
    /// CTC weight in the joint CTC-CMLM loss.
    pub gamma_nar: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub label_smoothing: f64,

    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub downsample_factor: usize,
    pub dropout_rate: f64,

    pub train_data: String,
    pub dev_data: String,
    /// Ring buffer size for per-epoch checkpoints.
    pub keep_checkpoints: usize,
    /// How many of the kept checkpoints, by dev accuracy, are averaged.
    pub average_top: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            model_type: ModelType::MaskCtc,
            lambda_ar: 0.3,
            gamma_nar: 0.3,
            epochs: 20,
            batch_size: 16,
            lr_peak: 2e-3,
            warmup_steps: 400,
            seed: 1,
            label_smoothing: 0.0,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            d_model: m.d_model,
            d_ff: m.d_ff,
            downsample_factor: m.downsample_factor,
            dropout_rate: m.dropout_rate,
            train_data: "data/train.mcds".into(),
            dev_data: "data/dev.mcds".into(),
            keep_checkpoints: 10,
            average_top: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_ar", self.lambda_ar), ("gamma_nar", self.gamma_nar)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{name} = {w} outside [0, 1]")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.keep_checkpoints == 0 || self.average_top == 0 {
            return Err(Error::Config(
                "epochs, batch_size, keep_checkpoints and average_top must be positive".into(),
            ));
        }
        if self.lr_peak.is_nan() || self.lr_peak <= 0.0 {
            return Err(Error::Config("lr_peak must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        self.model_config(1).validate()
    }

    pub fn model_config(&self, feat_dim: usize) -> ModelConfig {
        ModelConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            downsample_factor: self.downsample_factor,
            dropout_rate: self.dropout_rate,
            feat_dim,
        }
    }

    pub fn schedule(&self) -> WarmupSchedule {
        WarmupSchedule {
            peak: self.lr_peak,
            warmup: self.warmup_steps,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

/// Knobs for one utterance's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_ar: f64,
    pub gamma_nar: f64,
    pub label_smoothing: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        LossWeights {
            lambda_ar: c.lambda_ar,
            gamma_nar: c.gamma_nar,
            label_smoothing: c.label_smoothing,
        }
    }
}

/// Loss graph for one utterance under the model's own objective.
///
/// The CTC term is `log P(Y|X) / L`. Returns `Ok(None)` when the
/// transcript cannot be aligned to the encoder length. `rng` drives the
/// CMLM masks; `drop` drives dropout.
#[allow(clippy::too_many_arguments)]
pub fn utterance_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &Model<S>,
    bound: &Bound,
    features: &Tensor<S>,
    transcript: &[usize],
    weights: LossWeights,
    rng: &mut Rng,
    drop: &mut Dropout,
) -> Result<Option<Var>> {
    if transcript.is_empty() {
        return Ok(None);
    }
    let vocab = &model.vocab;
    let enc = model.encode_var(g, bound, features, drop)?;
    let lp = model.ctc_head_var(g, bound, enc)?;
    let ctc = ctc_log_prob_var(g, lp, transcript)?;
    if !g.scalar(ctc).is_finite() {
        return Ok(None);
    }
    let len = transcript.len();
    let ctc = g.scale(ctc, S::of(1.0 / len as f64));
    let loss = match model.kind {
        ModelType::CtcOnly => g.scale(ctc, S::of(-1.0)),
        ModelType::ArJoint => {
            let mut y_in = Vec::with_capacity(len + 1);
            y_in.push(vocab.sos());
            y_in.extend_from_slice(transcript);
            let mut targets: Vec<usize> = transcript.iter().map(|&t| vocab.decoder_class(t)).collect();
            targets.push(vocab.decoder_class(vocab.eos()));
            let logits = model.decode_step_var(g, bound, &y_in, enc, true, drop)?;
            let att = att_loss(g, logits, &targets, weights.label_smoothing)?;
            joint_ar_loss(g, ctc, att, weights.lambda_ar)?
        }
        ModelType::MaskCtc => {
            let n = sample_mask_count(len, rng).expect("transcript is non-empty");
            let masked = apply_training_masks(transcript, n, rng, vocab.mask())?;
            let targets: Vec<usize> = transcript.iter().map(|&t| vocab.decoder_class(t)).collect();
            let logits = model.decode_step_var(g, bound, &masked.tokens, enc, false, drop)?;
            let cmlm = cmlm_loss(g, logits, &targets, &masked.masked_positions, weights.label_smoothing)?;
            joint_nar_loss(g, ctc, cmlm, weights.gamma_nar)?
        }
    };
    Ok(Some(loss))
}

/// Loss value and parameter gradients for one utterance, in parameter
/// name order. `None` when the utterance is skipped.
pub fn utterance_gradients<S: Scalar>(
    model: &Model<S>,
    features: &Tensor<S>,
    transcript: &[usize],
    weights: LossWeights,
    stream: (u64, u64),
    dropout: bool,
) -> Result<Option<(f64, Vec<Vec<S>>)>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut mask_rng = Rng::stream(stream.0, stream.1);
    let mut drop_rng = Rng::stream(stream.0 ^ 0x9e37_79b9_7f4a_7c15, stream.1);
    let mut drop = if dropout {
        Dropout::on(model.config.dropout_rate, &mut drop_rng)
    } else {
        Dropout::off()
    };
    let Some(loss) = utterance_loss(&mut g, model, &bound, features, transcript, weights, &mut mask_rng, &mut drop)?
    else {
        return Ok(None);
    };
    let value = g.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    g.backward(loss)?;
    let grads = model
        .params
        .iter()
        .map(|(name, t)| {
            let v = bound.get(name).expect("every parameter is bound");
            g.take_grad(v).unwrap_or_else(|| vec![S::zero(); t.numel()])
        })
        .collect();
    Ok(Some((value, grads)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_acc: f64,
    pub skipped: usize,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,step,train_loss,dev_loss,dev_acc,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{}",
            self.epoch, self.step, self.train_loss, self.dev_loss, self.dev_acc, self.skipped
        )
    }
}

const SHUFFLE_STREAM: u64 = 1 << 48;
const DEV_STREAM: u64 = 1 << 49;

type UttGradients = (f64, Vec<Vec<f32>>);

/// Runs one epoch over `train` and returns its mean training loss and the
/// number of skipped utterances.
///
/// Utterance gradients are computed in parallel and summed in batch order,
/// so results do not depend on the thread count.
pub fn train_epoch(
    model: &mut Model<f32>,
    state: &mut TrainState<f32>,
    train: &[Utterance],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, usize)> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    Rng::stream(cfg.seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
    let weights = LossWeights::from(cfg);
    let schedule = cfg.schedule();
    let adam = AdamConfig::default();
    let mut loss_sum = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let results: Vec<Result<Option<UttGradients>>> = batch
            .par_iter()
            .map(|&i| {
                let u = &train[i];
                let stream = ((epoch as u64 + 1) << 32) | i as u64;
                utterance_gradients(model, &u.features, &u.transcript, weights, (cfg.seed, stream), true)
            })
            .collect();
        let mut total: Option<Vec<Vec<f32>>> = None;
        let mut n = 0usize;
        for (r, &i) in results.into_iter().zip(batch) {
            match r? {
                None => {
                    warn!("skipping {}: transcript does not fit the encoder length", train[i].id);
                    skipped += 1;
                }
                Some((loss, grads)) => {
                    loss_sum += loss;
                    n += 1;
                    match &mut total {
                        None => total = Some(grads),
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grads) {
                                a.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                            }
                        }
                    }
                }
            }
        }
        let Some(total) = total else { continue };
        counted += n;
        let scale = 1.0 / n as f32;
        for ((_, t), g) in model.params.iter_mut().zip(&total) {
            let scaled: Vec<f32> = g.iter().map(|&x| x * scale).collect();
            t.accumulate_grad(&scaled)?;
        }
        optimizer_step(&mut model.params, state, &schedule, &adam)?;
    }
    let mean = if counted > 0 { loss_sum / counted as f64 } else { f64::NAN };
    Ok((mean, skipped))
}

/// Dev loss (eval mode, fixed masks) and accuracy. Accuracy is
/// `1 - TER` of greedy CTC for CTC-decoded models and teacher-forced
/// next-token accuracy for the autoregressive model.
pub fn evaluate_dev(model: &Model<f32>, dev: &[Utterance], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let weights = LossWeights::from(cfg);
    let per_utt: Vec<Result<(Option<f64>, usize, usize)>> = dev
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let mut g = Graph::no_grad();
            let bound = model.bind(&mut g);
            let mut rng = Rng::stream(cfg.seed, DEV_STREAM + i as u64);
            let mut drop = Dropout::off();
            let loss = utterance_loss(&mut g, model, &bound, &u.features, &u.transcript, weights, &mut rng, &mut drop)?
                .map(|v| g.scalar(v) as f64);
            let (errors, total) = match model.kind {
                ModelType::ArJoint => {
                    let vocab = &model.vocab;
                    let enc = model.encode(&u.features)?;
                    let mut y_in = vec![vocab.sos()];
                    y_in.extend_from_slice(&u.transcript);
                    let lp = model.decode_step(&y_in, &enc, true)?;
                    let mut targets: Vec<usize> = u.transcript.clone();
                    targets.push(vocab.eos());
                    let wrong = targets
                        .iter()
                        .enumerate()
                        .filter(|&(l, &t)| argmax(lp.row(l)) != vocab.decoder_class(t))
                        .count();
                    (wrong, targets.len())
                }
                _ => {
                    let enc = model.encode(&u.features)?;
                    let hyp = ctc_greedy(&model.ctc_head(&enc)?).tokens;
                    (edit_distance(&u.transcript, &hyp).dist, u.transcript.len())
                }
            };
            Ok((loss, errors, total))
        })
        .collect();
    let (mut loss_sum, mut n, mut errors, mut total) = (0.0, 0usize, 0usize, 0usize);
    for r in per_utt {
        let (loss, e, t) = r?;
        if let Some(l) = loss {
            loss_sum += l;
            n += 1;
        }
        errors += e;
        total += t;
    }
    let loss = if n > 0 { loss_sum / n as f64 } else { f64::NAN };
    let acc = if total > 0 {
        (1.0 - errors as f64 / total as f64).max(0.0)
    } else {
        0.0
    };
    Ok((loss, acc))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_split, CorpusConfig};

    fn tiny_cfg(kind: ModelType) -> TrainConfig {
        TrainConfig {
            model_type: kind,
            enc_layers: 1,
            dec_layers: 1,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            dropout_rate: 0.0,
            batch_size: 4,
            lr_peak: 1e-3,
            warmup_steps: 10,
            ..TrainConfig::default()
        }
    }

    fn corpus() -> (CorpusConfig, Vec<Utterance>) {
        let c = CorpusConfig {
            vocab_size: 6,
            feat_dim: 8,
            utt_len: [2, 5],
            ..CorpusConfig::default()
        };
        let utts = gen_split(&c, 0, 8);
        (c, utts)
    }

    #[test]
    fn config_toml_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("lambda_ar = 2.0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let partial = TrainConfig::from_toml("model_type = \"ctc_only\"\nepochs = 3").unwrap();
        assert_eq!(partial.model_type, ModelType::CtcOnly);
        assert_eq!(partial.epochs, 3);
        for name in ["maskctc", "ar_joint"] {
            let c = TrainConfig::from_toml(&format!("model_type = \"{name}\"")).unwrap();
            assert_eq!(c.model_type.as_str(), name);
            assert!(c.to_toml().contains(&format!("model_type = \"{name}\"")));
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let (c, utts) = corpus();
        for kind in [ModelType::CtcOnly, ModelType::ArJoint, ModelType::MaskCtc] {
            let cfg = tiny_cfg(kind);
            let mut decreased = 0;
            for trial in 0..10u64 {
                let mut model = Model::<f32>::new(cfg.model_config(c.feat_dim), c.vocab(), kind, &mut Rng::new(trial)).unwrap();
                let u = &utts[trial as usize % utts.len()];
                let w = LossWeights::from(&cfg);
                let stream = (trial, 0);
                let (before, grads) = utterance_gradients(&model, &u.features, &u.transcript, w, stream, false)
                    .unwrap()
                    .unwrap();
                for ((_, t), g) in model.params.iter_mut().zip(&grads) {
                    t.data_mut().iter_mut().zip(g).for_each(|(p, &d)| *p -= 1e-3 * d);
                }
                let (after, _) = utterance_gradients(&model, &u.features, &u.transcript, w, stream, false)
                    .unwrap()
                    .unwrap();
                if after < before {
                    decreased += 1;
                }
            }
            assert_eq!(decreased, 10, "{kind}");
        }
    }

    #[test]
    fn epoch_is_deterministic() {
        let (c, utts) = corpus();
        let cfg = tiny_cfg(ModelType::MaskCtc);
        let run = || {
            let mut model = Model::<f32>::new(cfg.model_config(c.feat_dim), c.vocab(), cfg.model_type, &mut Rng::new(1)).unwrap();
            let mut state = TrainState::new(&model.params);
            let (l1, _) = train_epoch(&mut model, &mut state, &utts, &cfg, 0).unwrap();
            let (l2, _) = train_epoch(&mut model, &mut state, &utts, &cfg, 1).unwrap();
            (l1.to_bits(), l2.to_bits(), model.params)
        };
        let (a1, a2, pa) = run();
        let (b1, b2, pb) = run();
        assert_eq!((a1, a2), (b1, b2));
        assert_eq!(pa, pb);
    }

    #[test]
    fn infeasible_utterances_are_skipped() {
        let (c, _) = corpus();
        let cfg = tiny_cfg(ModelType::CtcOnly);
        let model = Model::<f32>::new(cfg.model_config(c.feat_dim), c.vocab(), cfg.model_type, &mut Rng::new(1)).unwrap();
        // 4 frames -> 2 encoder frames, cannot hold 3 tokens
        let x = Tensor::zeros([4, c.feat_dim]);
        let r = utterance_gradients(&model, &x, &[1, 2, 3], LossWeights::from(&cfg), (0, 0), false).unwrap();
        assert!(r.is_none());
    }
}
