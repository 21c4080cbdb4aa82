//! Convolutional encoder/decoder pair with ×4 temporal downscale.
//!
//! Encoder: input conv, then two stages of (stride-2 conv, resblocks),
//! then a projection to the code width. The decoder mirrors it with
//! nearest-neighbour upsampling followed by a conv per stage.

use super::CodecConfig;
use crate::error::Result;
use crate::ndmath::{Bound, ParamStore, Rng, Scalar, Tape, Var};

pub const STAGES: usize = 2;

fn conv_params<T: Scalar>(store: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize, gain: f64, rng: &mut Rng) {
    let std = gain / ((cin * k) as f64).sqrt();
    store.insert_normal(&format!("{name}.w"), &[cout, cin, k], std, rng);
    store.insert_zeros(&format!("{name}.b"), &[cout]);
}

fn resblock_params<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut Rng) {
    conv_params(store, &format!("{name}.c1"), width, width, 3, 2f64.sqrt(), rng);
    conv_params(store, &format!("{name}.c2"), width, width, 1, 0.1, rng);
}

pub fn init_params<T: Scalar>(cfg: &CodecConfig, rng: &mut Rng) -> ParamStore<T> {
    let (d_in, w, d) = (cfg.pose_dim, cfg.width, cfg.latent_dim);
    let mut s = ParamStore::new();
    let relu_gain = 2f64.sqrt();
    conv_params(&mut s, "enc.in", w, d_in, 3, relu_gain, rng);
    for stage in 0..STAGES {
        conv_params(&mut s, &format!("enc.down{stage}"), w, w, 4, 1.0, rng);
        for r in 0..cfg.resblocks {
            resblock_params(&mut s, &format!("enc.down{stage}.res{r}"), w, rng);
        }
    }
    conv_params(&mut s, "enc.out", d, w, 3, 1.0, rng);

    conv_params(&mut s, "dec.in", w, d, 3, relu_gain, rng);
    for stage in 0..STAGES {
        for r in 0..cfg.resblocks {
            resblock_params(&mut s, &format!("dec.up{stage}.res{r}"), w, rng);
        }
        conv_params(&mut s, &format!("dec.up{stage}"), w, w, 3, 1.0, rng);
    }
    conv_params(&mut s, "dec.mid", w, w, 3, relu_gain, rng);
    conv_params(&mut s, "dec.out", d_in, w, 3, 1.0, rng);
    s
}

struct Net<'a, T> {
    store: &'a ParamStore<T>,
    bound: &'a Bound,
}

impl<T: Scalar> Net<'_, T> {
    fn conv(&self, tape: &mut Tape<T>, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bound.var(self.store.id(&format!("{name}.w"))?);
        let b = self.bound.var(self.store.id(&format!("{name}.b"))?);
        tape.conv1d(x, w, b, stride, pad)
    }

    fn resblock(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let h = tape.relu(x);
        let h = self.conv(tape, h, &format!("{name}.c1"), 1, 1)?;
        let h = tape.relu(h);
        let h = self.conv(tape, h, &format!("{name}.c2"), 1, 0)?;
        tape.add(x, h)
    }
}

/// `[batch, pose_dim, N]` → `[batch, latent_dim, N/4]`.
pub fn encoder<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, bound: &Bound, resblocks: usize, x: Var) -> Result<Var> {
    let net = Net { store, bound };
    let h = net.conv(tape, x, "enc.in", 1, 1)?;
    let mut h = tape.relu(h);
    for stage in 0..STAGES {
        h = net.conv(tape, h, &format!("enc.down{stage}"), 2, 1)?;
        for r in 0..resblocks {
            h = net.resblock(tape, h, &format!("enc.down{stage}.res{r}"))?;
        }
    }
    net.conv(tape, h, "enc.out", 1, 1)
}

/// `[batch, latent_dim, n]` → `[batch, pose_dim, 4n]`.
pub fn decoder<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, bound: &Bound, resblocks: usize, z: Var) -> Result<Var> {
    let net = Net { store, bound };
    let h = net.conv(tape, z, "dec.in", 1, 1)?;
    let mut h = tape.relu(h);
    for stage in 0..STAGES {
        for r in 0..resblocks {
            h = net.resblock(tape, h, &format!("dec.up{stage}.res{r}"))?;
        }
        h = tape.upsample2(h);
        h = net.conv(tape, h, &format!("dec.up{stage}"), 1, 1)?;
    }
    let h = net.conv(tape, h, "dec.mid", 1, 1)?;
    let h = tape.relu(h);
    net.conv(tape, h, "dec.out", 1, 1)
}
