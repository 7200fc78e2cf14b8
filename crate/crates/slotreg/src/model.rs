//! Slot-attention autoencoder: CNN or frozen-feature front end, iterative
//! slot attention, and a decoder that reconstructs the input from slots.
//!
//! Every forward method builds onto a caller-owned [`Tape`], so one training
//! step composes encoder, attention, decoder, and regularizer terms into a
//! single graph.  Parameters live in a [`ParamSet`] and are bound to the tape
//! through [`TapedParams`], either as differentiable leaves (training) or as
//! constants (evaluation).

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{coord_grid, ParamSet, TapedParams};
use crate::rng::{self, stream, RngStream, Stream};
use crate::tape::{Conv2dSpec, Tape, Var};

/// Which reconstruction target the decoder produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Spatial broadcast decoder over RGB pixels.
    SpatialBroadcast,
    /// Shared MLP over slot + per-location query, reconstructing frozen features.
    MlpFeature,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input images are `image_size x image_size`; must be a multiple of 4
    /// because the spatial broadcast decoder starts from a quarter-resolution
    /// grid and upsamples twice.
    pub image_size: usize,
    /// Input channel count; the sprite data is RGB.
    pub channels: usize,
    /// Width of the encoder feature map and of the attention inputs.
    pub d_enc: usize,
    /// Slot width.
    pub d_slots: usize,
    /// Number of slots K.
    pub n_slots: usize,
    /// Slot attention iterations T.
    pub n_iters: usize,
    /// Projection head output width; must exceed `d_slots` so the slot
    /// vectors are never bottlenecked by the head itself.
    pub d_proj: usize,
    /// Hidden layers in the projection head, each of width `2 * d_proj`.
    pub proj_hidden_layers: usize,
    /// Channel width of the spatial broadcast decoder CNN.
    pub d_dec: usize,
    pub decoder: DecoderKind,
    /// Width of the frozen features; only read when `decoder` is `MlpFeature`.
    pub feature_dim: usize,
    /// Locations per image in the frozen feature grid; only read for `MlpFeature`.
    pub feature_locations: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            channels: 3,
            d_enc: 64,
            d_slots: 64,
            n_slots: 5,
            n_iters: 3,
            d_proj: 512,
            proj_hidden_layers: 2,
            d_dec: 64,
            decoder: DecoderKind::SpatialBroadcast,
            feature_dim: 0,
            feature_locations: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::config(format!(
                "channels must be 3, got {}",
                self.channels
            )));
        }
        if self.n_slots < 2 {
            return Err(Error::config(format!(
                "n_slots must be at least 2, got {}",
                self.n_slots
            )));
        }
        if self.n_iters < 1 {
            return Err(Error::config("n_iters must be at least 1"));
        }
        if self.d_enc == 0 || self.d_slots == 0 || self.d_dec == 0 {
            return Err(Error::config("widths d_enc, d_slots, d_dec must be positive"));
        }
        if self.d_proj <= self.d_slots {
            return Err(Error::config(format!(
                "d_proj ({}) must exceed d_slots ({}); the projection head must not \
                 narrow the slots it measures",
                self.d_proj, self.d_slots
            )));
        }
        if self.proj_hidden_layers < 1 {
            return Err(Error::config("proj_hidden_layers must be at least 1"));
        }
        match self.decoder {
            DecoderKind::SpatialBroadcast => {
                if self.image_size < 8 || self.image_size % 4 != 0 {
                    return Err(Error::config(format!(
                        "image_size must be a multiple of 4 and at least 8, got {}",
                        self.image_size
                    )));
                }
            }
            DecoderKind::MlpFeature => {
                if self.feature_dim == 0 || self.feature_locations == 0 {
                    return Err(Error::config(
                        "feature_dim and feature_locations must be positive for the \
                         mlp_feature decoder",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Side length of the decoder's broadcast grid.
    pub fn broadcast_grid(&self) -> usize {
        self.image_size / 4
    }

    /// Locations the attention runs over for the image path.
    pub fn n_locations(&self) -> usize {
        self.image_size * self.image_size
    }
}

const ENC_CONV: Conv2dSpec = Conv2dSpec { kernel: 5, stride: 1, pad: 2 };
const DEC_CONV_BASE: Conv2dSpec = Conv2dSpec { kernel: 5, stride: 1, pad: 2 };
const DEC_CONV_UP: Conv2dSpec = Conv2dSpec { kernel: 3, stride: 1, pad: 1 };
/// Added to attention weights before normalizing over locations, so a slot
/// that wins nowhere still receives a well-defined (uniform) update.
const ATTN_RENORM_EPS: f64 = 1e-8;

/// Model parameters plus the configuration that shaped them.
#[derive(Debug)]
pub struct SlotModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl SlotModel {
    /// Fresh model with parameters drawn from the init stream of `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<SlotModel> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, Stream::ModelInit);
        let params = init_params(&cfg, &mut rng);
        Ok(SlotModel { cfg, params })
    }

    /// Wraps restored parameters, checking that every name and shape matches
    /// what `cfg` would have initialized.
    pub fn from_parts(cfg: ModelConfig, params: ParamSet) -> Result<SlotModel> {
        let fresh = SlotModel::new(cfg)?;
        let expect: Vec<(&String, &[usize])> =
            fresh.params.iter().map(|(n, a)| (n, a.shape())).collect();
        let got: Vec<(&String, &[usize])> =
            params.iter().map(|(n, a)| (n, a.shape())).collect();
        for i in 0..expect.len().max(got.len()) {
            match (expect.get(i), got.get(i)) {
                (Some(e), Some(g)) if e == g => {}
                (Some((en, es)), Some((gn, gs))) => {
                    return Err(Error::config(format!(
                        "parameter mismatch: expected {en} {es:?}, found {gn} {gs:?}"
                    )));
                }
                (Some((en, _)), None) => {
                    return Err(Error::config(format!("missing parameter {en}")));
                }
                (None, Some((gn, _))) => {
                    return Err(Error::config(format!("unexpected parameter {gn}")));
                }
                (None, None) => unreachable!(),
            }
        }
        Ok(SlotModel {
            cfg: fresh.cfg,
            params,
        })
    }

    /// Binds the parameters to `t`; differentiable leaves when `trainable`.
    pub fn bind(&self, t: &mut Tape, trainable: bool) -> TapedParams {
        if trainable {
            TapedParams::leaves(t, &self.params)
        } else {
            TapedParams::constants(t, &self.params)
        }
    }

    /// CNN encoder: images `[B, 3, H, W]` to features `[B, H*W, d_enc]`.
    ///
    /// Four stride-1 convolutions keep the full resolution; a linear map of
    /// the coordinate grid is added so attention can tell locations apart,
    /// then each location passes through a LayerNorm and a two-layer MLP.
    pub fn encode(&self, t: &mut Tape, p: &TapedParams, images: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = t.shape(images).to_vec();
        let want = [shape.first().copied().unwrap_or(0), 3, cfg.image_size, cfg.image_size];
        if shape.len() != 4 || shape[1..] != want[1..] {
            return Err(Error::shape(&want, &shape, "encoder input"));
        }
        let b = shape[0];
        let mut x = images;
        for i in 1..=4 {
            let (w, bias) = p.conv(&format!("enc.c{i}"));
            let y = t.conv2d(x, w, ENC_CONV);
            let bias4 = t.reshape(bias, &[1, cfg.d_enc, 1, 1]);
            let y = t.add(y, bias4);
            x = t.relu(y);
        }
        let n = cfg.n_locations();
        let x = t.permute(x, &[0, 2, 3, 1]);
        let x = t.reshape(x, &[b, n, cfg.d_enc]);
        let grid = t.constant(
            coord_grid(cfg.image_size, cfg.image_size)
                .into_dyn(),
        );
        let pos = p.linear("enc.pos").apply(t, grid);
        let x = t.add(x, pos);
        let x = p.layer_norm("enc.post_ln").apply(t, x);
        let h = p.linear("enc.post_fc1").apply(t, x);
        let h = t.relu(h);
        Ok(p.linear("enc.post_fc2").apply(t, h))
    }

    /// Frozen-feature adapter: `[B, N, feature_dim]` to `[B, N, d_enc]`.
    ///
    /// LayerNorm tames whatever scale the frozen backbone emits, then a
    /// learned linear map brings the features into the attention width.
    pub fn adapt_features(&self, t: &mut Tape, p: &TapedParams, feats: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = t.shape(feats).to_vec();
        let want = [
            shape.first().copied().unwrap_or(0),
            cfg.feature_locations,
            cfg.feature_dim,
        ];
        if shape.len() != 3 || shape[1..] != want[1..] {
            return Err(Error::shape(&want, &shape, "frozen feature input"));
        }
        let x = p.layer_norm("frozen.ln").apply(t, feats);
        Ok(p.linear("frozen.adapter").apply(t, x))
    }

    /// Samples initial slots `[batch, K, d_slots]` from the learned Gaussian.
    ///
    /// The mean and log-sigma are shared across slots; the noise is the only
    /// thing breaking the symmetry between them.
    pub fn init_slots(
        &self,
        t: &mut Tape,
        p: &TapedParams,
        batch: usize,
        rng: &mut RngStream,
    ) -> Var {
        let cfg = &self.cfg;
        let d = cfg.d_slots;
        let mu = p.var("slots.mu");
        let mu = t.reshape(mu, &[1, 1, d]);
        let log_sigma = p.var("slots.log_sigma");
        let log_sigma = t.reshape(log_sigma, &[1, 1, d]);
        let sigma = t.exp(log_sigma);
        let eps = ArrayD::from_shape_fn(IxDyn(&[batch, cfg.n_slots, d]), |_| rng::normal(rng));
        let eps = t.constant(eps);
        let scaled = t.mul(sigma, eps);
        t.add(mu, scaled)
    }

    /// Iterative slot attention.
    ///
    /// `features` is `[B, N, d_enc]`, `slots` is `[B, K, d_slots]`.  Returns
    /// the refined slots and the final iteration's attention `[B, K, N]`,
    /// which sums to one over slots at every location.  Non-finite attention
    /// logits abort the step with a numerical error.
    pub fn slot_attention(
        &self,
        t: &mut Tape,
        p: &TapedParams,
        features: Var,
        slots: Var,
    ) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let fshape = t.shape(features).to_vec();
        if fshape.len() != 3 || fshape[2] != cfg.d_enc {
            return Err(Error::shape(
                &[fshape.first().copied().unwrap_or(0), 0, cfg.d_enc],
                &fshape,
                "slot attention features",
            ));
        }
        let d = cfg.d_slots;
        let inputs = p.layer_norm("attn.input_ln").apply(t, features);
        let k = p.linear("attn.k").apply(t, inputs);
        let v = p.linear("attn.v").apply(t, inputs);
        let kt = t.permute(k, &[0, 2, 1]);
        let scale = 1.0 / (d as f64).sqrt();

        let mut slots = slots;
        let mut attn = None;
        for _ in 0..cfg.n_iters {
            let s_ln = p.layer_norm("attn.slot_ln").apply(t, slots);
            let q = p.linear("attn.q").apply(t, s_ln);
            let logits = t.bmm(q, kt);
            let logits = t.scale(logits, scale);
            if !t.value(logits).iter().all(|x| x.is_finite()) {
                return Err(Error::numerical("non-finite attention logits"));
            }
            // Softmax over the slot axis: slots compete for each location.
            let a = t.softmax(logits, 1);
            attn = Some(a);
            let a_eps = t.add_scalar(a, ATTN_RENORM_EPS);
            let denom = t.sum_axis(a_eps, 2, true);
            let a_norm = t.div(a_eps, denom);
            let updates = t.bmm(a_norm, v);

            let bk = t.shape(slots)[0] * cfg.n_slots;
            let u2 = t.reshape(updates, &[bk, d]);
            let s2 = t.reshape(slots, &[bk, d]);
            let h2 = p.gru("attn.gru").apply(t, u2, s2);
            slots = t.reshape(h2, &[bk / cfg.n_slots, cfg.n_slots, d]);

            let m = p.layer_norm("attn.mlp_ln").apply(t, slots);
            let m = p.linear("attn.fc1").apply(t, m);
            let m = t.relu(m);
            let m = p.linear("attn.fc2").apply(t, m);
            slots = t.add(slots, m);
        }
        Ok((slots, attn.expect("n_iters is at least 1")))
    }

    /// Spatial broadcast decoder: slots `[B, K, d_slots]` to an RGB
    /// reconstruction `[B, 3, H, W]`, alpha masks `[B, K, H, W]` that sum to
    /// one over slots at every pixel, and per-slot RGB panels `[B, K, 3, H, W]`.
    pub fn decode_spatial_broadcast(
        &self,
        t: &mut Tape,
        p: &TapedParams,
        slots: Var,
    ) -> Result<(Var, Var, Var)> {
        let cfg = &self.cfg;
        let sshape = t.shape(slots).to_vec();
        if sshape.len() != 3 || sshape[2] != cfg.d_slots {
            return Err(Error::shape(
                &[sshape.first().copied().unwrap_or(0), sshape.get(1).copied().unwrap_or(0), cfg.d_slots],
                &sshape,
                "decoder slots",
            ));
        }
        let (b, k) = (sshape[0], sshape[1]);
        let g = cfg.broadcast_grid();
        let size = cfg.image_size;

        // Each slot decodes independently: fold K into the batch axis.
        let x = t.reshape(slots, &[b * k, cfg.d_slots, 1, 1]);
        let x = t.broadcast_to(x, &[b * k, cfg.d_slots, g, g]);
        let grid = t.constant(coord_grid(g, g).into_dyn());
        let pos = p.linear("dec.pos").apply(t, grid);
        let pos = t.reshape(pos, &[g, g, cfg.d_slots]);
        let pos = t.permute(pos, &[2, 0, 1]);
        let pos = t.reshape(pos, &[1, cfg.d_slots, g, g]);
        let x = t.add(x, pos);

        let x = self.dec_conv(t, p, x, "dec.c1", DEC_CONV_BASE, cfg.d_dec, true)?;
        let x = t.upsample2x(x);
        let x = self.dec_conv(t, p, x, "dec.c2", DEC_CONV_UP, cfg.d_dec, true)?;
        let x = t.upsample2x(x);
        let x = self.dec_conv(t, p, x, "dec.c3", DEC_CONV_UP, cfg.d_dec, true)?;
        let y = self.dec_conv(t, p, x, "dec.out", DEC_CONV_UP, 4, false)?;

        let y = t.reshape(y, &[b, k, 4, size, size]);
        let rgb = t.narrow(y, 2, 0, 3);
        let alpha_logits = t.narrow(y, 2, 3, 1);
        let alpha_logits = t.reshape(alpha_logits, &[b, k, size, size]);
        let alphas = t.softmax(alpha_logits, 1);
        let a5 = t.reshape(alphas, &[b, k, 1, size, size]);
        let weighted = t.mul(a5, rgb);
        let recon = t.sum_axis(weighted, 1, false);
        Ok((recon, alphas, rgb))
    }

    fn dec_conv(
        &self,
        t: &mut Tape,
        p: &TapedParams,
        x: Var,
        name: &str,
        spec: Conv2dSpec,
        c_out: usize,
        relu: bool,
    ) -> Result<Var> {
        let (w, bias) = p.conv(name);
        let y = t.conv2d(x, w, spec);
        let bias4 = t.reshape(bias, &[1, c_out, 1, 1]);
        let y = t.add(y, bias4);
        Ok(if relu { t.relu(y) } else { y })
    }

    /// MLP feature decoder: slots `[B, K, d_slots]` to reconstructed frozen
    /// features `[B, N, feature_dim]` plus location masks `[B, K, N]` that
    /// sum to one over slots.
    ///
    /// Each slot is paired with a learned per-location query and decoded by a
    /// shared MLP into a feature vector and a mask logit.
    pub fn decode_features_mlp(
        &self,
        t: &mut Tape,
        p: &TapedParams,
        slots: Var,
    ) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let sshape = t.shape(slots).to_vec();
        if sshape.len() != 3 || sshape[2] != cfg.d_slots {
            return Err(Error::shape(
                &[sshape.first().copied().unwrap_or(0), sshape.get(1).copied().unwrap_or(0), cfg.d_slots],
                &sshape,
                "decoder slots",
            ));
        }
        let (b, k) = (sshape[0], sshape[1]);
        let (n, df) = (cfg.feature_locations, cfg.feature_dim);

        let x = t.reshape(slots, &[b, k, 1, cfg.d_slots]);
        let pos = p.var("fdec.pos");
        let x = t.add(x, pos);
        let h = p.linear("fdec.fc1").apply(t, x);
        let h = t.relu(h);
        let h = p.linear("fdec.fc2").apply(t, h);
        let h = t.relu(h);
        let y = p.linear("fdec.fc3").apply(t, h);

        let feats = t.narrow(y, 3, 0, df);
        let alpha_logits = t.narrow(y, 3, df, 1);
        let alpha_logits = t.reshape(alpha_logits, &[b, k, n]);
        let alphas = t.softmax(alpha_logits, 1);
        let a4 = t.reshape(alphas, &[b, k, n, 1]);
        let weighted = t.mul(a4, feats);
        let recon = t.sum_axis(weighted, 1, false);
        Ok((recon, alphas))
    }

    /// Projection head: slots `[B, K, d_slots]` to `[B, K, d_proj]`.
    ///
    /// ReLU hidden layers of width `2 * d_proj` and a linear output.  The
    /// head exists so covariance penalties act on an expanded view of the
    /// slots rather than on the slots themselves.
    pub fn project(&self, t: &mut Tape, p: &TapedParams, slots: Var) -> Var {
        let cfg = &self.cfg;
        let mut x = slots;
        for i in 1..=cfg.proj_hidden_layers {
            x = p.linear(&format!("proj.fc{i}")).apply(t, x);
            x = t.relu(x);
        }
        p.linear(&format!("proj.fc{}", cfg.proj_hidden_layers + 1))
            .apply(t, x)
    }
}

/// Outputs of a full image-path forward pass.
pub struct ImageForward {
    pub recon: Var,
    pub alphas: Var,
    pub rgb: Var,
    pub slots: Var,
    pub attn: Var,
}

/// Outputs of a full frozen-feature forward pass.
pub struct FeatureForward {
    pub recon: Var,
    pub alphas: Var,
    pub slots: Var,
    pub attn: Var,
}

impl SlotModel {
    /// Encoder, attention, and spatial broadcast decoder in one pass.
    pub fn forward_image(
        &self,
        t: &mut Tape,
        p: &TapedParams,
        images: Var,
        rng: &mut RngStream,
    ) -> Result<ImageForward> {
        let feats = self.encode(t, p, images)?;
        let batch = t.shape(images)[0];
        let slots0 = self.init_slots(t, p, batch, rng);
        let (slots, attn) = self.slot_attention(t, p, feats, slots0)?;
        let (recon, alphas, rgb) = self.decode_spatial_broadcast(t, p, slots)?;
        Ok(ImageForward { recon, alphas, rgb, slots, attn })
    }

    /// Adapter, attention, and MLP feature decoder in one pass.
    pub fn forward_features(
        &self,
        t: &mut Tape,
        p: &TapedParams,
        feats: Var,
        rng: &mut RngStream,
    ) -> Result<FeatureForward> {
        let adapted = self.adapt_features(t, p, feats)?;
        let batch = t.shape(feats)[0];
        let slots0 = self.init_slots(t, p, batch, rng);
        let (slots, attn) = self.slot_attention(t, p, adapted, slots0)?;
        let (recon, alphas) = self.decode_features_mlp(t, p, slots)?;
        Ok(FeatureForward { recon, alphas, slots, attn })
    }
}

fn init_params(cfg: &ModelConfig, rng: &mut RngStream) -> ParamSet {
    let mut p = ParamSet::new();
    let d = cfg.d_slots;
    match cfg.decoder {
        DecoderKind::SpatialBroadcast => {
            p.add_conv("enc.c1", cfg.channels, cfg.d_enc, ENC_CONV.kernel, rng);
            p.add_conv("enc.c2", cfg.d_enc, cfg.d_enc, ENC_CONV.kernel, rng);
            p.add_conv("enc.c3", cfg.d_enc, cfg.d_enc, ENC_CONV.kernel, rng);
            p.add_conv("enc.c4", cfg.d_enc, cfg.d_enc, ENC_CONV.kernel, rng);
            p.add_linear("enc.pos", 4, cfg.d_enc, rng);
            p.add_layer_norm("enc.post_ln", cfg.d_enc);
            p.add_linear("enc.post_fc1", cfg.d_enc, cfg.d_enc, rng);
            p.add_linear("enc.post_fc2", cfg.d_enc, cfg.d_enc, rng);
        }
        DecoderKind::MlpFeature => {
            p.add_layer_norm("frozen.ln", cfg.feature_dim);
            p.add_linear("frozen.adapter", cfg.feature_dim, cfg.d_enc, rng);
        }
    }

    p.add_layer_norm("attn.input_ln", cfg.d_enc);
    p.add_linear_nobias("attn.q", d, d, rng);
    p.add_linear_nobias("attn.k", cfg.d_enc, d, rng);
    p.add_linear_nobias("attn.v", cfg.d_enc, d, rng);
    p.add_layer_norm("attn.slot_ln", d);
    p.add_gru("attn.gru", d, rng);
    p.add_layer_norm("attn.mlp_ln", d);
    p.add_linear("attn.fc1", d, 2 * d, rng);
    p.add_linear("attn.fc2", 2 * d, d, rng);
    p.xavier("slots.mu", &[d], 1, d, rng);
    p.xavier("slots.log_sigma", &[d], 1, d, rng);

    match cfg.decoder {
        DecoderKind::SpatialBroadcast => {
            p.add_linear("dec.pos", 4, d, rng);
            p.add_conv("dec.c1", d, cfg.d_dec, DEC_CONV_BASE.kernel, rng);
            p.add_conv("dec.c2", cfg.d_dec, cfg.d_dec, DEC_CONV_UP.kernel, rng);
            p.add_conv("dec.c3", cfg.d_dec, cfg.d_dec, DEC_CONV_UP.kernel, rng);
            p.add_conv("dec.out", cfg.d_dec, 4, DEC_CONV_UP.kernel, rng);
        }
        DecoderKind::MlpFeature => {
            p.xavier(
                "fdec.pos",
                &[cfg.feature_locations, d],
                cfg.feature_locations,
                d,
                rng,
            );
            p.add_linear("fdec.fc1", d, 2 * d, rng);
            p.add_linear("fdec.fc2", 2 * d, 2 * d, rng);
            p.add_linear("fdec.fc3", 2 * d, cfg.feature_dim + 1, rng);
        }
    }

    let mut w_in = d;
    for i in 1..=cfg.proj_hidden_layers {
        p.add_linear(&format!("proj.fc{i}"), w_in, 2 * cfg.d_proj, rng);
        w_in = 2 * cfg.d_proj;
    }
    p.add_linear(
        &format!("proj.fc{}", cfg.proj_hidden_layers + 1),
        w_in,
        cfg.d_proj,
        rng,
    );
    p
}
