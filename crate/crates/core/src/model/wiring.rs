//! Graph construction for every block of the network, generic over the
//! tape element type.
//!
//! A [`Graph`] wraps a [`Tape`] plus the parameter store: parameters are
//! bound lazily as leaves the first time a block references them, so
//! block-level entry points only touch the tensors they need. In training
//! mode the graph also collects the batch statistics each batch-norm saw,
//! so the engine can update the running buffers afterwards.

use indexmap::IndexMap;
use ndarray::{Array1, ArrayD};

use super::config::ModelConfig;
use super::store::ParameterStore;
use crate::error::{Error, Result};
use crate::tape::{Scalar, Tape, Var};

/// Forward-pass mode: training uses batch statistics in normalisation
/// layers, evaluation uses the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training
/// forward pass, keyed by the running-buffer names they should update.
pub struct BnUpdate<T: Scalar> {
    pub mean_buffer: String,
    pub var_buffer: String,
    pub batch_mean: Array1<T>,
    /// Biased (population) variance over the batch.
    pub batch_var: Array1<T>,
    /// Elements averaged per channel (batch x height x width).
    pub count: usize,
}

/// A tape plus lazy name->leaf binding over a parameter store.
pub struct Graph<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParameterStore,
    bound: IndexMap<String, Var>,
    trainable: bool,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// `trainable` controls whether bound parameters accumulate gradients.
    pub fn new(store: &'s ParameterStore, mode: Mode, trainable: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: IndexMap::new(),
            trainable,
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Leaf for an input tensor (never trainable).
    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        self.tape.leaf(value, false)
    }

    /// Bind (or reuse) the parameter `name` as a leaf.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let arr = self.store.param(name)?.mapv(T::from_f32);
        let v = self.tape.leaf(arr.into_dyn(), self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn buffer1(&self, name: &str) -> Result<Array1<T>> {
        let arr = self.store.buffer(name)?;
        Ok(arr
            .mapv(T::from_f32)
            .into_dimensionality()
            .map_err(|_| Error::Shape(format!("buffer {name:?} is not rank 1")))?)
    }

    /// Names and leaf handles of every parameter bound so far, in binding
    /// order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ------------------------------------------------------------------
    // Blocks
    // ------------------------------------------------------------------

    /// Channel-wise self-attention. Returns the output and the
    /// channel-by-channel attention map node (`(B, C, C)`).
    pub fn csa(&mut self, prefix: &str, x: Var) -> Result<(Var, Var)> {
        let q_pw = self.p(&format!("{prefix}.q_pw.weight"))?;
        let q_dw = self.p(&format!("{prefix}.q_dw.weight"))?;
        let k_pw = self.p(&format!("{prefix}.k_pw.weight"))?;
        let k_dw = self.p(&format!("{prefix}.k_dw.weight"))?;
        let v_pw = self.p(&format!("{prefix}.v_pw.weight"))?;
        let v_dw = self.p(&format!("{prefix}.v_dw.weight"))?;
        let temperature = self.p(&format!("{prefix}.temperature"))?;

        let shape = self.tape.value(x).shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;

        let t = &mut self.tape;
        let q = t.conv2d(x, q_pw, None, 1, 0, 1);
        let q = t.dwconv3x3(q, q_dw);
        let k = t.conv2d(x, k_pw, None, 1, 0, 1);
        let k = t.dwconv3x3(k, k_dw);
        let v = t.conv2d(x, v_pw, None, 1, 0, 1);
        let v = t.dwconv3x3(v, v_dw);

        // K as (B, C, HW), Q transposed to (B, HW, C): their product is the
        // channel-by-channel similarity map.
        let k_r = t.reshape(k, &[b, c, hw]);
        let q_r = t.reshape(q, &[b, c, hw]);
        let q_t = t.transpose_last2(q_r);
        let v_r = t.reshape(v, &[b, c, hw]);

        let logits = t.bmm(k_r, q_t);
        let scaled = t.div_by_scalar(logits, temperature);
        let attn = t.softmax_last(scaled);
        let out = t.bmm(attn, v_r);
        let out = t.reshape(out, &[b, c, h, w]);
        Ok((out, attn))
    }

    /// Gated feed-forward: pointwise expansion, depthwise 3x3, gated
    /// half-products, pointwise projection, with its own residual.
    pub fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let expand = self.p(&format!("{prefix}.expand.weight"))?;
        let dw = self.p(&format!("{prefix}.dw.weight"))?;
        let project = self.p(&format!("{prefix}.project.weight"))?;
        let h = self.tape.value(project).shape()[1];

        let t = &mut self.tape;
        let e = t.conv2d(x, expand, None, 1, 0, 1);
        let e = t.dwconv3x3(e, dw);
        let gate_in = t.slice_channels(e, 0, h);
        let carry = t.slice_channels(e, h, h);
        let gated = t.gelu(gate_in);
        let gated = t.mul(gated, carry);
        Ok(t.conv2d(gated, project, None, 1, 0, 1))
    }

    /// Channel self-attention block: pre-norm attention with projection
    /// and residual, then a pre-norm gated feed-forward with residual.
    pub fn csab(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let ln1_g = self.p(&format!("{prefix}.ln1.gamma"))?;
        let ln1_b = self.p(&format!("{prefix}.ln1.beta"))?;
        let normed = self.tape.layer_norm_ch(x, ln1_g, ln1_b);
        let (attn_out, _map) = self.csa(prefix, normed)?;
        let proj = self.p(&format!("{prefix}.proj.weight"))?;
        let projected = self.tape.conv2d(attn_out, proj, None, 1, 0, 1);
        let f = self.tape.add(projected, x);

        let ln2_g = self.p(&format!("{prefix}.ln2.gamma"))?;
        let ln2_b = self.p(&format!("{prefix}.ln2.beta"))?;
        let normed2 = self.tape.layer_norm_ch(f, ln2_g, ln2_b);
        let ffn_out = self.ffn(&format!("{prefix}.ffn"), normed2)?;
        Ok(self.tape.add(f, ffn_out))
    }

    /// Glyph-stream residual block: two 3x3 conv + batch-norm layers with
    /// a ReLU between them and an identity residual.
    pub fn gsnb(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w1 = self.p(&format!("{prefix}.conv1.weight"))?;
        let g1 = self.p(&format!("{prefix}.bn1.gamma"))?;
        let b1 = self.p(&format!("{prefix}.bn1.beta"))?;
        let w2 = self.p(&format!("{prefix}.conv2.weight"))?;
        let g2 = self.p(&format!("{prefix}.bn2.gamma"))?;
        let b2 = self.p(&format!("{prefix}.bn2.beta"))?;

        let c1 = self.tape.conv2d(x, w1, None, 1, 1, 1);
        let n1 = self.batch_norm(&format!("{prefix}.bn1"), c1, g1, b1)?;
        let r = self.tape.relu(n1);
        let c2 = self.tape.conv2d(r, w2, None, 1, 1, 1);
        let n2 = self.batch_norm(&format!("{prefix}.bn2"), c2, g2, b2)?;
        Ok(self.tape.add(x, n2))
    }

    fn batch_norm(&mut self, prefix: &str, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        match self.mode {
            Mode::Train => {
                let count = {
                    let s = self.tape.value(x).shape();
                    s[0] * s[2] * s[3]
                };
                let (y, mean, var) = self.tape.batch_norm_train(x, gamma, beta);
                self.bn_updates.push(BnUpdate {
                    mean_buffer: format!("{prefix}.running_mean"),
                    var_buffer: format!("{prefix}.running_var"),
                    batch_mean: mean,
                    batch_var: var,
                    count,
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.buffer1(&format!("{prefix}.running_mean"))?;
                let rv = self.buffer1(&format!("{prefix}.running_var"))?;
                Ok(self.tape.batch_norm_eval(x, gamma, beta, &rm, &rv))
            }
        }
    }

    /// Selective fusion of the two streams. Returns the re-weighted
    /// reconstruction stream, glyph stream, their sum, and the two
    /// attention-weight nodes (`(B, C, 1, 1)` each).
    pub fn skff(
        &mut self,
        prefix: &str,
        recon: Var,
        glyph: Var,
    ) -> Result<(Var, Var, Var, Var, Var)> {
        let fuse_w = self.p(&format!("{prefix}.fuse.weight"))?;
        let fuse_b = self.p(&format!("{prefix}.fuse.bias"))?;
        let r_w = self.p(&format!("{prefix}.gate_r.weight"))?;
        let r_b = self.p(&format!("{prefix}.gate_r.bias"))?;
        let g_w = self.p(&format!("{prefix}.gate_g.weight"))?;
        let g_b = self.p(&format!("{prefix}.gate_g.bias"))?;

        let t = &mut self.tape;
        let sum = t.add(recon, glyph);
        let pooled = t.global_avg_pool(sum);
        let compact = t.conv2d(pooled, fuse_w, Some(fuse_b), 1, 0, 1);
        let logit_r = t.conv2d(compact, r_w, Some(r_b), 1, 0, 1);
        let logit_g = t.conv2d(compact, g_w, Some(g_b), 1, 0, 1);
        // Two-way softmax per channel: sigmoid of the logit difference is
        // exp(r) / (exp(r) + exp(g)), and the complement goes to the glyph
        // stream, so the weights sum to one by construction.
        let diff = t.sub(logit_r, logit_g);
        let attn_r = t.sigmoid(diff);
        let attn_g = t.one_minus(attn_r);
        let fused_r = t.mul_bcast_c(recon, attn_r);
        let fused_g = t.mul_bcast_c(glyph, attn_g);
        let fused = t.add(fused_r, fused_g);
        Ok((fused_r, fused_g, fused, attn_r, attn_g))
    }

    /// One fusion stage: a chain of attention blocks, a parallel chain of
    /// glyph blocks, and the selective fusion of the two results. Returns
    /// `(fused, recon_chain_out, glyph_chain_out)`.
    pub fn ofb(&mut self, cfg: &ModelConfig, prefix: &str, x: Var) -> Result<(Var, Var, Var)> {
        let mut recon = x;
        for j in 0..cfg.csab_per_block {
            recon = self.csab(&format!("{prefix}.csab{j}"), recon)?;
        }
        let mut glyph = x;
        for j in 0..cfg.gsnb_per_block {
            glyph = self.gsnb(&format!("{prefix}.gsnb{j}"), glyph)?;
        }
        let (_, _, fused, _, _) = self.skff(&format!("{prefix}.skff"), recon, glyph)?;
        Ok((fused, recon, glyph))
    }

    /// Strided 4x4 downsampling convolution (halves H/W, doubles C).
    pub fn downsample(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        Ok(self.tape.conv2d(x, w, None, 2, 1, 1))
    }

    /// Transposed 2x2 upsampling convolution (doubles H/W, halves C).
    pub fn upsample(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        Ok(self.tape.conv_transpose2x2(x, w))
    }

    /// Full network. Returns `(denoised, skeleton, final_recon, final_glyph)`
    /// where the last two are the stream outputs of the last decoder stage
    /// that feed the two heads.
    pub fn network(&mut self, cfg: &ModelConfig, img: Var) -> Result<(Var, Var, Var, Var)> {
        let in_w = self.p("input_proj.weight")?;
        let in_b = self.p("input_proj.bias")?;
        let f0 = {
            let t = &mut self.tape;
            let c = t.conv2d(img, in_w, Some(in_b), 1, 1, 1);
            t.leaky_relu(c, 0.2)
        };

        // Encoder: stage output feeds both the downsampler and the skip.
        let mut skips: Vec<Var> = Vec::with_capacity(cfg.encoder_depth);
        let mut cur = f0;
        for i in 0..cfg.encoder_depth {
            let (fused, _, _) = self.ofb(cfg, &format!("enc{i}"), cur)?;
            skips.push(fused);
            cur = self.downsample(&format!("down{i}"), fused)?;
        }

        let (mut cur, _, _) = self.ofb(cfg, "mid", cur)?;

        // Decoder: upsample, add the mirrored skip, run the stage.
        let mut final_streams = None;
        for i in (0..cfg.encoder_depth).rev() {
            let up = self.upsample(&format!("up{i}"), cur)?;
            let merged = self.tape.add(up, skips[i]);
            let (fused, recon, glyph) = self.ofb(cfg, &format!("dec{i}"), merged)?;
            cur = fused;
            final_streams = Some((recon, glyph));
        }
        let (final_recon, final_glyph) =
            final_streams.expect("encoder_depth >= 1 guarantees a decoder stage");

        // Denoised head: 3x3 conv over the shallow features plus the final
        // reconstruction stream. Skeleton head: 3x3 conv over the final
        // glyph stream.
        let out_w = self.p("output_proj.weight")?;
        let out_b = self.p("output_proj.bias")?;
        let corr_w = self.p("corrector.weight")?;
        let corr_b = self.p("corrector.bias")?;
        let t = &mut self.tape;
        let head_in = t.add(f0, final_recon);
        let denoised = t.conv2d(head_in, out_w, Some(out_b), 1, 1, 1);
        let skeleton = t.conv2d(final_glyph, corr_w, Some(corr_b), 1, 1, 1);
        Ok((denoised, skeleton, final_recon, final_glyph))
    }
}
