//! Desk-scale disentanglement network.
//!
//! Three parallel encoder branches (content, forgery, demographic) of two
//! stride-2 convolutions each. The forgery branch emits `2·C_f` channels which
//! are split into the domain-specific half `f_a` and the domain-agnostic half
//! `f_g`. The decoder mirrors the encoder with two transposed convolutions over
//! `concat(c, f_a, f_g, d)`. All four heads are two-layer MLPs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ImageShape;
use crate::error::{Error, Result};
use crate::numerics::{adain_forward, ParameterStore, Tape, Tensor, Var};

const KERNEL: usize = 2;
const STRIDE: usize = 2;

/// Default AdaIN stabilizer added to the content std.
pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image: ImageShape,
    /// `C_f`: channels of each of the four feature maps.
    pub feature_channels: usize,
    /// Width of the intermediate encoder/decoder layer.
    pub hidden_channels: usize,
    pub head_hidden: usize,
    /// `|A|`, including the real domain.
    pub num_domains: usize,
    /// `|J|`.
    pub num_subgroups: usize,
    pub adain_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::default(),
            feature_channels: 8,
            hidden_channels: 8,
            head_hidden: 32,
            num_domains: 4,
            num_subgroups: 2,
            adain_eps: ADAIN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let img = self.image;
        for (name, v) in [
            ("image.channels", img.channels),
            ("image.height", img.height),
            ("image.width", img.width),
            ("feature_channels", self.feature_channels),
            ("hidden_channels", self.hidden_channels),
            ("head_hidden", self.head_hidden),
            ("num_domains", self.num_domains),
            ("num_subgroups", self.num_subgroups),
        ] {
            if v == 0 {
                bad.push(format!("{name}: must be at least 1"));
            }
        }
        let down = KERNEL * STRIDE;
        if img.height % down != 0 || img.width % down != 0 {
            bad.push(format!(
                "image: height and width must be multiples of {down}"
            ));
        } else if (img.height / down) * (img.width / down) < 2 {
            bad.push(String::from(
                "image: feature maps need at least 2 spatial cells",
            ));
        }
        if !(self.adain_eps >= 0.0 && self.adain_eps.is_finite()) {
            bad.push(String::from("adain_eps: must be finite and non-negative"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    /// `(C_f, h, w)` of each feature map.
    pub fn feature_shape(&self) -> [usize; 3] {
        [
            self.feature_channels,
            self.image.height / (KERNEL * STRIDE),
            self.image.width / (KERNEL * STRIDE),
        ]
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape().iter().product()
    }
}

/// The four classification heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadId {
    /// `h`: real/fake from the fused map `I`.
    Fused,
    /// `h̃`: real/fake from `f_g`.
    Agnostic,
    /// `h̄`: forgery domain from `f_a`.
    Specific,
    /// `ĥ`: subgroup from `d`.
    Demographic,
}

impl HeadId {
    pub const ALL: [HeadId; 4] = [
        HeadId::Fused,
        HeadId::Agnostic,
        HeadId::Specific,
        HeadId::Demographic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadId::Fused => "fused",
            HeadId::Agnostic => "agnostic",
            HeadId::Specific => "specific",
            HeadId::Demographic => "demographic",
        }
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" | "fused" => Ok(HeadId::Fused),
            "h_tilde" | "agnostic" => Ok(HeadId::Agnostic),
            "h_bar" | "specific" => Ok(HeadId::Specific),
            "h_hat" | "demographic" => Ok(HeadId::Demographic),
            other => Err(Error::invalid(format!("unknown head `{other}`"))),
        }
    }
}

/// Encoder outputs `(c, f_a, f_g, d)` as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledFeatures {
    pub c: Tensor,
    pub f_a: Tensor,
    pub f_g: Tensor,
    pub d: Tensor,
}

/// Encoder outputs as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub c: Var,
    pub f_a: Var,
    pub f_g: Var,
    pub d: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Content,
    Forgery,
    Demographic,
}

impl Branch {
    fn name(self) -> &'static str {
        match self {
            Branch::Content => "content",
            Branch::Forgery => "forgery",
            Branch::Demographic => "demographic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_width(&self, head: HeadId) -> usize {
        match head {
            HeadId::Fused | HeadId::Agnostic => 2,
            HeadId::Specific => self.config.num_domains,
            HeadId::Demographic => self.config.num_subgroups,
        }
    }

    fn branch_out(&self, branch: Branch) -> usize {
        match branch {
            Branch::Forgery => 2 * self.config.feature_channels,
            _ => self.config.feature_channels,
        }
    }

    /// Weight shapes in insertion order with their fan-in.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let cfg = &self.config;
        let (k, hid) = (KERNEL, cfg.hidden_channels);
        let mut out = Vec::new();
        for branch in [Branch::Content, Branch::Forgery, Branch::Demographic] {
            let p = format!("enc.{}", branch.name());
            let c_out = self.branch_out(branch);
            out.push((
                format!("{p}.conv1.weight"),
                alloc::vec![hid, cfg.image.channels, k, k],
                cfg.image.channels * k * k,
            ));
            out.push((format!("{p}.conv1.bias"), alloc::vec![hid], 0));
            out.push((
                format!("{p}.conv2.weight"),
                alloc::vec![c_out, hid, k, k],
                hid * k * k,
            ));
            out.push((format!("{p}.conv2.bias"), alloc::vec![c_out], 0));
        }
        let dec_in = 4 * cfg.feature_channels;
        let per_out = (k * k) / (STRIDE * STRIDE);
        out.push((
            String::from("dec.up1.weight"),
            alloc::vec![dec_in, hid, k, k],
            dec_in * per_out,
        ));
        out.push((String::from("dec.up1.bias"), alloc::vec![hid], 0));
        out.push((
            String::from("dec.up2.weight"),
            alloc::vec![hid, cfg.image.channels, k, k],
            hid * per_out,
        ));
        out.push((
            String::from("dec.up2.bias"),
            alloc::vec![cfg.image.channels],
            0,
        ));
        let feat = cfg.feature_len();
        for head in HeadId::ALL {
            let p = format!("head.{}", head.name());
            let w = self.head_width(head);
            out.push((
                format!("{p}.fc1.weight"),
                alloc::vec![cfg.head_hidden, feat],
                feat,
            ));
            out.push((format!("{p}.fc1.bias"), alloc::vec![cfg.head_hidden], 0));
            out.push((
                format!("{p}.fc2.weight"),
                alloc::vec![w, cfg.head_hidden],
                cfg.head_hidden,
            ));
            out.push((format!("{p}.fc2.bias"), alloc::vec![w], 0));
        }
        out
    }

    /// Fresh parameters: weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(&self, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for (name, shape, fan_in) in self.layout() {
            let t = if fan_in == 0 {
                Tensor::zeros(&shape)
            } else {
                uniform(&mut rng, &shape, fan_in)
            };
            store.insert(name, t).expect("fresh names are unique");
        }
        store
    }

    /// Checks that `store` holds every parameter with the expected shape.
    pub fn check_params(&self, store: &ParameterStore) -> Result<()> {
        for (name, shape, _) in self.layout() {
            let t = store.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("params", &shape, t.shape()));
            }
        }
        Ok(())
    }

    /// Names of the parameters of one encoder branch.
    pub fn branch_params(&self, branch: Branch) -> Vec<String> {
        let p = format!("enc.{}.", branch.name());
        self.layout()
            .into_iter()
            .map(|(n, _, _)| n)
            .filter(|n| n.starts_with(&p))
            .collect()
    }

    fn branch(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        branch: Branch,
        x: Var,
    ) -> Result<Var> {
        let p = format!("enc.{}", branch.name());
        let w1 = tape.param(store, &format!("{p}.conv1.weight"))?;
        let b1 = tape.param(store, &format!("{p}.conv1.bias"))?;
        let w2 = tape.param(store, &format!("{p}.conv2.weight"))?;
        let b2 = tape.param(store, &format!("{p}.conv2.bias"))?;
        let h = tape.conv2d(x, w1, b1, STRIDE)?;
        let h = tape.relu(h)?;
        tape.conv2d(h, w2, b2, STRIDE)
    }

    /// `c, f_a, f_g, d = E(x)`.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<FeatureVars> {
        let dims = self.config.image.dims();
        if tape.value(x).shape() != dims {
            return Err(Error::shape("encode", &dims, tape.value(x).shape()));
        }
        let cf = self.config.feature_channels;
        let c = self.branch(tape, store, Branch::Content, x)?;
        let f = self.branch(tape, store, Branch::Forgery, x)?;
        let d = self.branch(tape, store, Branch::Demographic, x)?;
        let f_a = tape.narrow(f, 0, cf)?;
        let f_g = tape.narrow(f, cf, cf)?;
        Ok(FeatureVars { c, f_a, f_g, d })
    }

    /// Combined forgery feature `f = concat(f_a, f_g)` fed to the decoder.
    pub fn combine_forgery(&self, tape: &mut Tape, f_a: Var, f_g: Var) -> Result<Var> {
        tape.concat(&[f_a, f_g])
    }

    /// `D(c, f, d)`, with `f` the combined `2·C_f`-channel forgery map.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        c: Var,
        f: Var,
        d: Var,
    ) -> Result<Var> {
        let fs = self.config.feature_shape();
        for (v, ch) in [(c, fs[0]), (f, 2 * fs[0]), (d, fs[0])] {
            let want = [ch, fs[1], fs[2]];
            if tape.value(v).shape() != want {
                return Err(Error::shape("decode", &want, tape.value(v).shape()));
            }
        }
        let z = tape.concat(&[c, f, d])?;
        let w1 = tape.param(store, "dec.up1.weight")?;
        let b1 = tape.param(store, "dec.up1.bias")?;
        let w2 = tape.param(store, "dec.up2.weight")?;
        let b2 = tape.param(store, "dec.up2.bias")?;
        let h = tape.conv_transpose2d(z, w1, b1, STRIDE)?;
        let h = tape.relu(h)?;
        tape.conv_transpose2d(h, w2, b2, STRIDE)
    }

    /// Fused map `I = AdaIN(f_g, d)`.
    pub fn fuse(&self, tape: &mut Tape, f_g: Var, d: Var) -> Result<Var> {
        tape.adain(f_g, d, self.config.adain_eps)
    }

    pub fn head(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        head: HeadId,
        feature: Var,
    ) -> Result<Var> {
        let want = self.config.feature_len();
        if tape.value(feature).len() != want {
            return Err(Error::shape("head", &[want], tape.value(feature).shape()));
        }
        let p = format!("head.{}", head.name());
        let w1 = tape.param(store, &format!("{p}.fc1.weight"))?;
        let b1 = tape.param(store, &format!("{p}.fc1.bias"))?;
        let w2 = tape.param(store, &format!("{p}.fc2.weight"))?;
        let b2 = tape.param(store, &format!("{p}.fc2.bias"))?;
        let h = tape.dense(feature, w1, b1)?;
        let h = tape.relu(h)?;
        tape.dense(h, w2, b2)
    }

    pub fn encode_values(
        &self,
        store: &ParameterStore,
        x: &Tensor,
    ) -> Result<DisentangledFeatures> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let f = self.encode(&mut tape, store, xv)?;
        Ok(DisentangledFeatures {
            c: tape.value(f.c).clone(),
            f_a: tape.value(f.f_a).clone(),
            f_g: tape.value(f.f_g).clone(),
            d: tape.value(f.d).clone(),
        })
    }

    pub fn decode_values(
        &self,
        store: &ParameterStore,
        c: &Tensor,
        f: &Tensor,
        d: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (cv, fv, dv) = (
            tape.constant(c.clone())?,
            tape.constant(f.clone())?,
            tape.constant(d.clone())?,
        );
        let out = self.decode(&mut tape, store, cv, fv, dv)?;
        Ok(tape.value(out).clone())
    }

    pub fn head_forward(
        &self,
        store: &ParameterStore,
        head: HeadId,
        feature: &Tensor,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = tape.constant(feature.clone())?;
        let out = self.head(&mut tape, store, head, v)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Per-channel `σ(d)·(f_g − μ(f_g))/(σ(f_g) + eps) + μ(d)` with spatial
/// population moments.
pub fn adain_fuse(f_g: &Tensor, d: &Tensor, eps: f64) -> Result<Tensor> {
    adain_forward(f_g, d, eps)
}
