//! The differentiable components: a 3-layer bidirectional GRU encoder, a
//! 2-layer GRU inpainting decoder, the translation layer, the classifier,
//! the aggregation perceptron and the discriminator.
//!
//! Each component has a tape-level forward (`*_on_tape`) used for training
//! and gradient checks, plus a plain-array wrapper for single samples.
//! Batched sequences are laid out as `(T * B) x (J * 3)` matrices with row
//! `t * B + b` holding frame `t` of sample `b`.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, GruLayer, Group, Linear, Mlp, ParamStore};
use crate::seed;
use crate::tape::{Mat, Tape, Var};

pub const ENCODER_LAYERS: usize = 3;
pub const DECODER_LAYERS: usize = 2;
/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before sigmoid/softmax.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Widths of every component. Layer counts are fixed by the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub classes: usize,
    /// Hidden width per direction of the encoder; the feature width is twice this.
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub classifier_hidden: usize,
    /// Two hidden widths of the 3-layer aggregation perceptron.
    pub aggregator_hidden: [usize; 2],
    /// Three hidden widths of the 4-layer discriminator.
    pub discriminator_hidden: [usize; 3],
}

impl ModelConfig {
    /// Full-size widths: 512-wide GRUs, 1024-wide features.
    pub fn full(joints: usize, classes: usize) -> Self {
        Self::scaled(joints, classes, 512)
    }

    /// Perceptron widths scaled from the full-size ratios
    /// (`d -> d/2 -> d/4 -> d/16 -> 1` and so on) for a given GRU width.
    pub fn scaled(joints: usize, classes: usize, hidden: usize) -> Self {
        let d = 2 * hidden;
        let w = |div: usize| (d / div).max(1);
        Self {
            joints,
            classes,
            encoder_hidden: hidden,
            decoder_hidden: hidden,
            classifier_hidden: w(4),
            aggregator_hidden: [w(4), w(16)],
            discriminator_hidden: [w(2), w(4), w(16)],
        }
    }

    pub fn feature_width(&self) -> usize {
        2 * self.encoder_hidden
    }

    pub fn input_width(&self) -> usize {
        3 * self.joints
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.joints, self.encoder_hidden, self.decoder_hidden, self.classifier_hidden];
        if self.classes < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid model widths: {self:?}")));
        }
        if self.aggregator_hidden.contains(&0) || self.discriminator_hidden.contains(&0) {
            return Err(Error::Config(format!("invalid perceptron widths: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    /// `[forward, backward]` per layer.
    pub layers: Vec<[GruLayer; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub init: Linear,
    pub layers: Vec<GruLayer>,
    pub readout: Linear,
}

/// Temporal feature `h` produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Array1<f64>);

/// Feature after the translation layer, `h̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatedFeature(pub Array1<f64>);

/// Class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution(pub Array1<f64>);

impl ClassDistribution {
    pub fn argmax(&self) -> usize {
        argmax(self.0.iter().copied())
    }

    pub fn max_prob(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// All parameters plus the structure that indexes into them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub translator: Linear,
    pub classifier: Mlp,
    pub aggregator: Mlp,
    pub discriminator: Mlp,
}

/// Stacks equally shaped `(T, J, 3)` arrays into a `(T * B) x (J * 3)` matrix.
pub fn batch_matrix(inputs: &[&Array3<f64>]) -> Mat {
    let (t, j, _) = inputs[0].dim();
    let b = inputs.len();
    let mut out = Array2::zeros((t * b, j * 3));
    for (bi, x) in inputs.iter().enumerate() {
        assert_eq!(x.dim(), (t, j, 3), "batch_matrix: shape mismatch");
        for ti in 0..t {
            let mut row = out.row_mut(ti * b + bi);
            for (k, v) in x.slice(ndarray::s![ti, .., ..]).iter().enumerate() {
                row[k] = *v;
            }
        }
    }
    out
}

/// Inverse of [`batch_matrix`] for sample `index` of a batch of `batch`.
pub fn unbatch(m: &Mat, steps: usize, batch: usize, index: usize) -> Array3<f64> {
    let j = m.ncols() / 3;
    Array3::from_shape_fn((steps, j, 3), |(t, jj, c)| m[[t * batch + index, jj * 3 + c]])
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl ModelBundle {
    /// Fresh parameters: orthogonal recurrent matrices, fan-in uniform
    /// affine weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[0x1417]);
        let mut params = ParamStore::new();
        let d = config.feature_width();
        let input = config.input_width();
        let h = config.encoder_hidden;

        let mut layers = Vec::with_capacity(ENCODER_LAYERS);
        for l in 0..ENCODER_LAYERS {
            let width = if l == 0 { input } else { 2 * h };
            let fwd = GruLayer::new(&mut params, &format!("encoder.{l}.forward"), width, h, &mut rng);
            let bwd = GruLayer::new(&mut params, &format!("encoder.{l}.backward"), width, h, &mut rng);
            layers.push([fwd, bwd]);
        }
        let encoder = Encoder { layers };

        let hd = config.decoder_hidden;
        let init = Linear::new(&mut params, "decoder.init", Group::Model, d, DECODER_LAYERS * hd, &mut rng);
        let dec_layers = (0..DECODER_LAYERS)
            .map(|l| {
                let width = if l == 0 { input } else { hd };
                GruLayer::new(&mut params, &format!("decoder.{l}"), width, hd, &mut rng)
            })
            .collect();
        let readout = Linear::new(&mut params, "decoder.readout", Group::Model, hd, input, &mut rng);
        let decoder = Decoder { init, layers: dec_layers, readout };

        let translator = Linear::new(&mut params, "translator", Group::Model, d, d, &mut rng);
        let classifier = Mlp::new(
            &mut params,
            "classifier",
            Group::Model,
            &[d, config.classifier_hidden, config.classes],
            Activation::Relu,
            &mut rng,
        );
        let [a1, a2] = config.aggregator_hidden;
        let aggregator = Mlp::new(&mut params, "aggregator", Group::Model, &[d, a1, a2, 1], Activation::Relu, &mut rng);
        let [d1, d2, d3] = config.discriminator_hidden;
        let discriminator = Mlp::new(
            &mut params,
            "discriminator",
            Group::Discriminator,
            &[d, d1, d2, d3, 1],
            Activation::LeakyRelu,
            &mut rng,
        );
        Ok(Self { config, params, encoder, decoder, translator, classifier, aggregator, discriminator })
    }

    pub fn feature_width(&self) -> usize {
        self.config.feature_width()
    }

    /// Encoder forward; returns the `B x d` feature and every layer's
    /// per-step output.
    pub fn encode_traced(&self, tape: &mut Tape, p: &Bound, xs: Var, steps: usize, batch: usize) -> (Var, Vec<Var>) {
        let mut input = xs;
        let mut traces = Vec::with_capacity(ENCODER_LAYERS);
        let mut last = (input, input);
        for [fwd, bwd] in &self.encoder.layers {
            let (out_f, last_f) = fwd.run(tape, p, input, steps, batch, None, false);
            let (out_b, last_b) = bwd.run(tape, p, input, steps, batch, None, true);
            input = tape.concat_cols(&[out_f, out_b]);
            traces.push(input);
            last = (last_f, last_b);
        }
        let feature = tape.concat_cols(&[last.0, last.1]);
        (feature, traces)
    }

    pub fn encode_on_tape(&self, tape: &mut Tape, p: &Bound, xs: Var, steps: usize, batch: usize) -> Var {
        self.encode_traced(tape, p, xs, steps, batch).0
    }

    /// Reconstructs the full sequence from `h` and the masked frames.
    pub fn decode_on_tape(&self, tape: &mut Tape, p: &Bound, h: Var, masked: Var, steps: usize, batch: usize) -> Var {
        let hd = self.config.decoder_hidden;
        let init = self.decoder.init.forward(tape, p, h);
        let mut input = masked;
        for (l, layer) in self.decoder.layers.iter().enumerate() {
            let h0 = tape.cols(init, l * hd, hd);
            input = layer.run(tape, p, input, steps, batch, Some(h0), false).0;
        }
        self.decoder.readout.forward(tape, p, input)
    }

    pub fn translate_on_tape(&self, tape: &mut Tape, p: &Bound, h: Var) -> Var {
        self.translator.forward(tape, p, h)
    }

    /// Clamped classifier logits, `B x C`.
    pub fn logits_on_tape(&self, tape: &mut Tape, p: &Bound, hbar: Var) -> Var {
        let raw = self.classifier.forward(tape, p, hbar);
        tape.clamp(raw, -LOGIT_CLAMP, LOGIT_CLAMP)
    }

    pub fn classify_on_tape(&self, tape: &mut Tape, p: &Bound, hbar: Var) -> Var {
        let logits = self.logits_on_tape(tape, p, hbar);
        tape.softmax(logits)
    }

    /// Discriminator probability that a feature comes from labeled data, `B x 1`.
    pub fn discriminate_on_tape(&self, tape: &mut Tape, p: &Bound, hbar: Var) -> Var {
        let raw = self.discriminator.forward(tape, p, hbar);
        let clamped = tape.clamp(raw, -LOGIT_CLAMP, LOGIT_CLAMP);
        tape.sigmoid(clamped)
    }

    /// Raw aggregation score for each row of `diff`, `N x 1`.
    pub fn aggregate_on_tape(&self, tape: &mut Tape, p: &Bound, diff: Var) -> Var {
        self.aggregator.forward(tape, p, diff)
    }

    fn frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape, &[])
    }

    fn single(&self, x: &Array1<f64>) -> Mat {
        x.clone().insert_axis(ndarray::Axis(0))
    }

    pub fn encode(&self, x: &Array3<f64>) -> Result<FeatureVector> {
        let (t, j, _) = x.dim();
        if j != self.config.joints {
            return Err(Error::Contract(format!("input has {j} joints, model expects {}", self.config.joints)));
        }
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let xs = tape.constant(batch_matrix(&[x]));
        let (h, traces) = self.encode_traced(&mut tape, &p, xs, t, 1);
        for (l, v) in traces.iter().enumerate() {
            check_finite(&tape, *v, &format!("encoder layer {l}"))?;
        }
        Ok(FeatureVector(tape.value(h).row(0).to_owned()))
    }

    pub fn decode(&self, h: &FeatureVector, masked: &Array3<f64>) -> Result<Array3<f64>> {
        let t = masked.dim().0;
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let hv = tape.constant(self.single(&h.0));
        let xs = tape.constant(batch_matrix(&[masked]));
        let out = self.decode_on_tape(&mut tape, &p, hv, xs, t, 1);
        check_finite(&tape, out, "decoder")?;
        Ok(unbatch(tape.value(out), t, 1, 0))
    }

    pub fn translate(&self, h: &FeatureVector) -> Result<TranslatedFeature> {
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let hv = tape.constant(self.single(&h.0));
        let out = self.translate_on_tape(&mut tape, &p, hv);
        check_finite(&tape, out, "translator")?;
        Ok(TranslatedFeature(tape.value(out).row(0).to_owned()))
    }

    pub fn classify(&self, hbar: &TranslatedFeature) -> Result<ClassDistribution> {
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let hv = tape.constant(self.single(&hbar.0));
        let out = self.classify_on_tape(&mut tape, &p, hv);
        check_finite(&tape, out, "classifier")?;
        Ok(ClassDistribution(tape.value(out).row(0).to_owned()))
    }

    pub fn discriminate(&self, hbar: &TranslatedFeature) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let hv = tape.constant(self.single(&hbar.0));
        let out = self.discriminate_on_tape(&mut tape, &p, hv);
        check_finite(&tape, out, "discriminator")?;
        Ok(tape.value(out)[[0, 0]])
    }

    pub fn aggregate_score(&self, diff: &Array1<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let dv = tape.constant(self.single(diff));
        let out = self.aggregate_on_tape(&mut tape, &p, dv);
        check_finite(&tape, out, "aggregator")?;
        Ok(tape.value(out)[[0, 0]])
    }

    /// Translated features for many prepared inputs, computed in chunks.
    pub fn translated_features(&self, inputs: &[Array3<f64>]) -> Result<Mat> {
        let d = self.feature_width();
        let mut out = Array2::zeros((inputs.len(), d));
        const CHUNK: usize = 64;
        for (c, chunk) in inputs.chunks(CHUNK).enumerate() {
            let refs: Vec<&Array3<f64>> = chunk.iter().collect();
            let steps = chunk[0].dim().0;
            let mut tape = Tape::new();
            let p = self.frozen(&mut tape);
            let xs = tape.constant(batch_matrix(&refs));
            let h = self.encode_on_tape(&mut tape, &p, xs, steps, chunk.len());
            let hbar = self.translate_on_tape(&mut tape, &p, h);
            check_finite(&tape, hbar, "translated features")?;
            out.slice_mut(ndarray::s![c * CHUNK..c * CHUNK + chunk.len(), ..]).assign(tape.value(hbar));
        }
        Ok(out)
    }

    /// Class probabilities for many prepared inputs.
    pub fn predict(&self, inputs: &[Array3<f64>]) -> Result<Vec<ClassDistribution>> {
        let feats = self.translated_features(inputs)?;
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let hv = tape.constant(feats);
        let probs = self.classify_on_tape(&mut tape, &p, hv);
        Ok(tape.value(probs).rows().into_iter().map(|r| ClassDistribution(r.to_owned())).collect())
    }

    /// Parameter count per component prefix, e.g. `"encoder"`.
    pub fn component_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .ids()
            .map(|id| self.params.name(id).split('.').next().unwrap_or_default().to_string())
            .collect();
        names.dedup();
        names
    }
}
