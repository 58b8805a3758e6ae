//! Model construction: allocates every named tensor with seeded,
//! zero-mean, fan-in-scaled uniform initialisation.
//!
//! The builder walks the architecture in data-flow order (input projector,
//! encoder stages with downsamplers, bottleneck, decoder stages with
//! upsamplers, output heads), inserting parameters in that order. Both the
//! wiring code and the FLOP walker rely on these names, so the naming
//! scheme here is the single authority.

use ndarray::{ArrayD, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::store::ParameterStore;
use crate::error::Result;

/// All stage prefixes of a configuration in forward order:
/// `enc0..encN-1`, `mid`, `decN-1..dec0`.
pub fn stage_prefixes(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for i in 0..cfg.encoder_depth {
        out.push((format!("enc{i}"), cfg.channels_at(i)));
    }
    out.push(("mid".to_string(), cfg.channels_at(cfg.encoder_depth)));
    for i in (0..cfg.encoder_depth).rev() {
        out.push((format!("dec{i}"), cfg.channels_at(i)));
    }
    out
}

struct Builder {
    store: ParameterStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| dist.sample(&mut self.rng) as f32)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product agree");
        self.store.insert_param(name, arr)
    }

    /// Convolution weight `(c_out, c_in/groups, k, k)`.
    fn conv(&mut self, name: &str, c_out: usize, c_in_g: usize, k: usize) -> Result<()> {
        self.uniform_fan_in(name, &[c_out, c_in_g, k, k], c_in_g * k * k)
    }

    /// Transposed-convolution weight `(c_in, c_out, k, k)` for stride-k
    /// upsampling, where each output pixel sees exactly `c_in` inputs.
    fn conv_transpose(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        self.uniform_fan_in(name, &[c_in, c_out, k, k], c_in)
    }

    fn fill(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        self.store
            .insert_param(name, ArrayD::from_elem(IxDyn(shape), value))
    }

    fn fill_buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        self.store
            .insert_buffer(name, ArrayD::from_elem(IxDyn(shape), value))
    }

    fn csab(&mut self, prefix: &str, c: usize, temperature: f32) -> Result<()> {
        let h = ModelConfig::ffn_hidden(c);
        self.fill(&format!("{prefix}.ln1.gamma"), &[c], 1.0)?;
        self.fill(&format!("{prefix}.ln1.beta"), &[c], 0.0)?;
        for head in ["q", "k", "v"] {
            self.conv(&format!("{prefix}.{head}_pw.weight"), c, c, 1)?;
            self.uniform_fan_in(&format!("{prefix}.{head}_dw.weight"), &[c, 1, 3, 3], 9)?;
        }
        self.fill(&format!("{prefix}.temperature"), &[1], temperature)?;
        self.conv(&format!("{prefix}.proj.weight"), c, c, 1)?;
        self.fill(&format!("{prefix}.ln2.gamma"), &[c], 1.0)?;
        self.fill(&format!("{prefix}.ln2.beta"), &[c], 0.0)?;
        self.conv(&format!("{prefix}.ffn.expand.weight"), 2 * h, c, 1)?;
        self.uniform_fan_in(&format!("{prefix}.ffn.dw.weight"), &[2 * h, 1, 3, 3], 9)?;
        self.conv(&format!("{prefix}.ffn.project.weight"), c, h, 1)?;
        Ok(())
    }

    fn gsnb(&mut self, prefix: &str, c: usize) -> Result<()> {
        for idx in [1, 2] {
            self.conv(&format!("{prefix}.conv{idx}.weight"), c, c, 3)?;
            self.fill(&format!("{prefix}.bn{idx}.gamma"), &[c], 1.0)?;
            self.fill(&format!("{prefix}.bn{idx}.beta"), &[c], 0.0)?;
            self.fill_buffer(&format!("{prefix}.bn{idx}.running_mean"), &[c], 0.0)?;
            self.fill_buffer(&format!("{prefix}.bn{idx}.running_var"), &[c], 1.0)?;
        }
        Ok(())
    }

    fn skff(&mut self, prefix: &str, c: usize) -> Result<()> {
        let d = ModelConfig::skff_reduced(c);
        self.conv(&format!("{prefix}.fuse.weight"), d, c, 1)?;
        self.fill(&format!("{prefix}.fuse.bias"), &[d], 0.0)?;
        for gate in ["gate_r", "gate_g"] {
            self.conv(&format!("{prefix}.{gate}.weight"), c, d, 1)?;
            self.fill(&format!("{prefix}.{gate}.bias"), &[c], 0.0)?;
        }
        Ok(())
    }

    fn stage(&mut self, prefix: &str, c: usize, cfg: &ModelConfig) -> Result<()> {
        for j in 0..cfg.csab_per_block {
            self.csab(
                &format!("{prefix}.csab{j}"),
                c,
                cfg.attention_temperature_init,
            )?;
        }
        for j in 0..cfg.gsnb_per_block {
            self.gsnb(&format!("{prefix}.gsnb{j}"), c)?;
        }
        self.skff(&format!("{prefix}.skff"), c)
    }
}

/// Allocate and initialise every tensor of the network described by `cfg`.
/// Identical `(cfg, seed)` pairs produce bit-identical stores.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut b = Builder {
        store: ParameterStore::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let c0 = cfg.base_channels;

    b.conv("input_proj.weight", c0, cfg.io_channels, 3)?;
    b.fill("input_proj.bias", &[c0], 0.0)?;

    for i in 0..cfg.encoder_depth {
        let c = cfg.channels_at(i);
        b.stage(&format!("enc{i}"), c, cfg)?;
        b.conv(&format!("down{i}.weight"), 2 * c, c, 4)?;
    }

    b.stage("mid", cfg.channels_at(cfg.encoder_depth), cfg)?;

    for i in (0..cfg.encoder_depth).rev() {
        let c = cfg.channels_at(i);
        b.conv_transpose(&format!("up{i}.weight"), 2 * c, c, 2)?;
        b.stage(&format!("dec{i}"), c, cfg)?;
    }

    b.conv("output_proj.weight", cfg.io_channels, c0, 3)?;
    b.fill("output_proj.bias", &[cfg.io_channels], 0.0)?;
    b.conv("corrector.weight", cfg.skeleton_channels, c0, 3)?;
    b.fill("corrector.bias", &[cfg.skeleton_channels], 0.0)?;

    Ok(b.store)
}

/// Total trainable scalar count (buffers excluded).
pub fn count_parameters(store: &ParameterStore) -> usize {
    store.scalar_count()
}
