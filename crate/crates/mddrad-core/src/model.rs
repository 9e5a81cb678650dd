//! The adversarial network: twin-branch convolutional feature extractor,
//! bottleneck, main classifier head f, adversarial head f', and the
//! gradient reversal layer. Parameters live in plain vectors; each forward
//! pass binds them onto a [`Tape`] as leaves.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MddError, Result};
use crate::losses::argmax_label;
use crate::rng::Xoshiro256;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture description. `desk` trains in minutes on a CPU; `full`
/// mirrors the 64x128 inputs and the 512-node bottleneck.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub branch: Vec<ConvSpec>,
    pub bottleneck: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            input_h: 16,
            input_w: 32,
            branch: vec![
                ConvSpec { out_channels: 8, kernel: 3, stride: 2 },
                ConvSpec { out_channels: 16, kernel: 3, stride: 2 },
                ConvSpec { out_channels: 32, kernel: 3, stride: 2 },
            ],
            bottleneck: 128,
            head_hidden: 64,
            num_classes,
        }
    }

    pub fn full(num_classes: usize) -> Self {
        ModelConfig {
            input_h: 64,
            input_w: 128,
            branch: vec![
                ConvSpec { out_channels: 8, kernel: 3, stride: 2 },
                ConvSpec { out_channels: 16, kernel: 3, stride: 2 },
                ConvSpec { out_channels: 32, kernel: 3, stride: 2 },
            ],
            bottleneck: 512,
            head_hidden: 256,
            num_classes,
        }
    }

    /// Flat feature length of one branch for this input size.
    fn branch_out_len(&self) -> usize {
        let (mut h, mut w, mut c) = (self.input_h, self.input_w, 1);
        for spec in &self.branch {
            h = (h - spec.kernel) / spec.stride + 1;
            w = (w - spec.kernel) / spec.stride + 1;
            c = spec.out_channels;
        }
        c * h * w
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Vec<f64>,
    pub weight_shape: [usize; 4],
    pub bias: Vec<f64>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct AffineLayer {
    pub weight: Vec<f64>, // [in, out] row-major
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: Vec<f64>,
}

fn glorot(rng: &mut Xoshiro256, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.uniform(-a, a)).collect()
}

impl ConvLayer {
    fn new(rng: &mut Xoshiro256, in_c: usize, spec: ConvSpec) -> Self {
        let [o, c, kh, kw] = [spec.out_channels, in_c, spec.kernel, spec.kernel];
        ConvLayer {
            weight: glorot(rng, o * c * kh * kw, c * kh * kw, o * kh * kw),
            weight_shape: [o, c, kh, kw],
            bias: vec![0.0; o],
            stride: spec.stride,
        }
    }
}

impl AffineLayer {
    fn new(rng: &mut Xoshiro256, in_dim: usize, out_dim: usize) -> Self {
        AffineLayer {
            weight: glorot(rng, in_dim * out_dim, in_dim, out_dim),
            in_dim,
            out_dim,
            bias: vec![0.0; out_dim],
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub branch_r: Vec<ConvLayer>,
    pub branch_d: Vec<ConvLayer>,
    pub bottleneck: AffineLayer,
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: AffineLayer,
    pub fc2: AffineLayer,
}

impl ClassifierHead {
    fn new(rng: &mut Xoshiro256, bottleneck: usize, hidden: usize, k: usize) -> Self {
        ClassifierHead {
            fc1: AffineLayer::new(rng, bottleneck, hidden),
            fc2: AffineLayer::new(rng, hidden, k),
        }
    }
}

/// The full network: psi shared by both heads, f and f' with disjoint
/// parameters.
#[derive(Clone, Debug)]
pub struct MddNetwork {
    pub config: ModelConfig,
    pub psi: FeatureExtractor,
    pub f: ClassifierHead,
    pub f_adv: ClassifierHead,
}

/// Parameter group selector, used to freeze parts of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Psi,
    F,
    FAdv,
}

impl MddNetwork {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = Xoshiro256::derive(seed, 0x6D6F64656C);
        let make_branch = |rng: &mut Xoshiro256| {
            let mut in_c = 1;
            let mut layers = Vec::new();
            for spec in &config.branch {
                layers.push(ConvLayer::new(rng, in_c, *spec));
                in_c = spec.out_channels;
            }
            layers
        };
        let branch_r = make_branch(&mut rng);
        let branch_d = make_branch(&mut rng);
        let bottleneck = AffineLayer::new(&mut rng, 2 * config.branch_out_len(), config.bottleneck);
        let f = ClassifierHead::new(&mut rng, config.bottleneck, config.head_hidden, config.num_classes);
        let f_adv =
            ClassifierHead::new(&mut rng, config.bottleneck, config.head_hidden, config.num_classes);
        MddNetwork {
            config,
            psi: FeatureExtractor { branch_r, branch_d, bottleneck },
            f,
            f_adv,
        }
    }

    /// Re-draw the adversarial head from a fresh seed, leaving psi and f
    /// untouched.
    pub fn reset_adversary(&mut self, seed: u64) {
        let mut rng = Xoshiro256::derive(seed, 0x66616476);
        self.f_adv = ClassifierHead::new(
            &mut rng,
            self.config.bottleneck,
            self.config.head_hidden,
            self.config.num_classes,
        );
    }

    /// Canonical (name, shape) manifest. The order here defines the
    /// parameter order everywhere: SGD state, checkpoints, tape binding.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (tag, branch) in [("r", &self.psi.branch_r), ("d", &self.psi.branch_d)] {
            for (i, conv) in branch.iter().enumerate() {
                out.push((format!("psi.{tag}.conv{i}.weight"), conv.weight_shape.to_vec()));
                out.push((format!("psi.{tag}.conv{i}.bias"), vec![conv.weight_shape[0]]));
            }
        }
        for (name, aff) in self.affine_list() {
            out.push((format!("{name}.weight"), vec![aff.in_dim, aff.out_dim]));
            out.push((format!("{name}.bias"), vec![aff.out_dim]));
        }
        out
    }

    fn affine_list(&self) -> Vec<(&'static str, &AffineLayer)> {
        vec![
            ("psi.bottleneck", &self.psi.bottleneck),
            ("f.fc1", &self.f.fc1),
            ("f.fc2", &self.f.fc2),
            ("f_adv.fc1", &self.f_adv.fc1),
            ("f_adv.fc2", &self.f_adv.fc2),
        ]
    }

    /// Which part a manifest entry belongs to, in manifest order.
    pub fn part_of(&self, index: usize) -> Part {
        let conv_params = (self.psi.branch_r.len() + self.psi.branch_d.len()) * 2;
        if index < conv_params + 2 {
            Part::Psi
        } else if index < conv_params + 6 {
            Part::F
        } else {
            Part::FAdv
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for branch in [&self.psi.branch_r, &self.psi.branch_d] {
            for conv in branch {
                out.push(&conv.weight);
                out.push(&conv.bias);
            }
        }
        for (_, aff) in self.affine_list() {
            out.push(&aff.weight);
            out.push(&aff.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for branch in [&mut self.psi.branch_r, &mut self.psi.branch_d] {
            for conv in branch {
                out.push(&mut conv.weight);
                out.push(&mut conv.bias);
            }
        }
        out.push(&mut self.psi.bottleneck.weight);
        out.push(&mut self.psi.bottleneck.bias);
        for head in [&mut self.f, &mut self.f_adv] {
            out.push(&mut head.fc1.weight);
            out.push(&mut head.fc1.bias);
            out.push(&mut head.fc2.weight);
            out.push(&mut head.fc2.bias);
        }
        out
    }

    /// Bind all parameters onto the tape. `trainable` selects which parts
    /// get gradient buffers; the rest are constants for this pass.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Part) -> bool) -> Result<BoundNetwork> {
        let manifest = self.manifest();
        let params = self.params();
        let mut vars = Vec::with_capacity(params.len());
        for (i, (p, (_, shape))) in params.iter().zip(&manifest).enumerate() {
            let rg = trainable(self.part_of(i));
            vars.push(tape.leaf((*p).clone(), shape, rg)?);
        }
        Ok(BoundNetwork {
            vars,
            n_branch_layers: self.psi.branch_r.len(),
            strides: self.config.branch.iter().map(|s| s.stride).collect(),
            bottleneck_dims: (self.psi.bottleneck.in_dim, self.psi.bottleneck.out_dim),
        })
    }
}

/// Tape handles for one bound forward pass.
pub struct BoundNetwork {
    /// One Var per manifest entry, in manifest order.
    pub vars: Vec<Var>,
    n_branch_layers: usize,
    strides: Vec<usize>,
    bottleneck_dims: (usize, usize),
}

impl BoundNetwork {
    fn branch_vars(&self, which: usize) -> &[Var] {
        let per = self.n_branch_layers * 2;
        &self.vars[which * per..(which + 1) * per]
    }

    fn affine_vars(&self, idx: usize) -> (Var, Var) {
        let base = self.n_branch_layers * 4 + idx * 2;
        (self.vars[base], self.vars[base + 1])
    }

    fn forward_branch(&self, tape: &mut Tape, which: usize, x: Var) -> Result<Var> {
        let vars = self.branch_vars(which);
        let mut cur = x;
        for (i, stride) in self.strides.iter().enumerate() {
            let conv = tape.conv2d(cur, vars[i * 2], *stride)?;
            let biased = tape.add_chan(conv, vars[i * 2 + 1])?;
            cur = tape.relu(biased);
        }
        let n = tape.shape(cur)[0];
        let flat_len = tape.data(cur).len() / n;
        tape.reshape(cur, &[n, flat_len])
    }

    fn forward_affine(&self, tape: &mut Tape, idx: usize, x: Var) -> Result<Var> {
        let (w, b) = self.affine_vars(idx);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// psi(x): concat of the two branch outputs, then bottleneck + relu.
    /// Inputs are batched [n,1,H,W] range and Doppler maps.
    pub fn forward_features(&self, tape: &mut Tape, x_r: Var, x_d: Var) -> Result<Var> {
        let fr = self.forward_branch(tape, 0, x_r)?;
        let fd = self.forward_branch(tape, 1, x_d)?;
        let joined = tape.concat(&[fr, fd], 1)?;
        let expect = self.bottleneck_dims.0;
        if tape.shape(joined)[1] != expect {
            return Err(MddError::Dimension {
                op: "forward_features",
                lhs: tape.shape(joined).to_vec(),
                rhs: vec![expect],
            });
        }
        let bottle = self.forward_affine(tape, 0, joined)?;
        Ok(tape.relu(bottle))
    }

    /// Classifier head f over features: [n,B] -> [n,k].
    pub fn forward_f(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let h = self.forward_affine(tape, 1, features)?;
        let h = tape.relu(h);
        self.forward_affine(tape, 2, h)
    }

    /// Adversarial head f' over features: [n,B] -> [n,k].
    pub fn forward_f_adv(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let h = self.forward_affine(tape, 3, features)?;
        let h = tape.relu(h);
        self.forward_affine(tape, 4, h)
    }
}

/// Gradient reversal: identity forward, gradient scaled by -eta backward.
pub fn grl_apply(tape: &mut Tape, features: Var, eta: f64) -> Result<Var> {
    if eta < 0.0 || !eta.is_finite() {
        return Err(MddError::contract(format!("grl_apply: eta must be >= 0, got {eta}")));
    }
    Ok(tape.grad_reverse(features, eta))
}

/// Argmax prediction, lowest index on ties (1-based).
pub fn predict(f_scores: &[f64]) -> usize {
    argmax_label(f_scores)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MDDNET01";

/// Versioned binary checkpoint: magic, model config (JSON), layer manifest,
/// then raw little-endian f64 parameter blocks in manifest order.
pub fn save_checkpoint(net: &MddNetwork, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(&net.config)
        .map_err(|e| MddError::Format(format!("config serialization: {e}")))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let manifest = net.manifest();
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for (name, shape) in &manifest {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    for p in net.params() {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MddError::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<MddNetwork> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(MddError::Format("checkpoint magic mismatch".into()));
    }
    let cfg_len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(cfg_len)?)
        .map_err(|e| MddError::Format(format!("checkpoint config: {e}")))?;
    let mut net = MddNetwork::new(config, 0);
    let expected = net.manifest();
    let count = cur.u32()? as usize;
    if count != expected.len() {
        return Err(MddError::Format(format!(
            "checkpoint manifest has {count} entries, expected {}",
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let nlen = cur.u32()? as usize;
        let got_name = std::str::from_utf8(cur.take(nlen)?)
            .map_err(|_| MddError::Format("checkpoint manifest name not utf-8".into()))?;
        if got_name != name {
            return Err(MddError::Format(format!(
                "checkpoint layer '{got_name}' does not match expected '{name}'"
            )));
        }
        let rank = cur.u32()? as usize;
        let mut got_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            got_shape.push(cur.u32()? as usize);
        }
        if &got_shape != shape {
            return Err(MddError::Format(format!(
                "checkpoint layer '{name}' shape {got_shape:?} != {shape:?}"
            )));
        }
    }
    for p in net.params_mut() {
        for v in p.iter_mut() {
            *v = cur.f64()?;
        }
    }
    if cur.pos != buf.len() {
        return Err(MddError::Format("checkpoint has trailing bytes".into()));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_h: 4,
            input_w: 8,
            branch: vec![ConvSpec { out_channels: 2, kernel: 3, stride: 1 }],
            bottleneck: 8,
            head_hidden: 4,
            num_classes: 3,
        }
    }

    fn forward_on(
        net: &MddNetwork,
        x_r: &[f64],
        x_d: &[f64],
        requires_grad: bool,
    ) -> (Tape, Var) {
        let cfg = &net.config;
        let mut tape = Tape::new();
        let shape = [1, 1, cfg.input_h, cfg.input_w];
        let xr = tape.leaf(x_r.to_vec(), &shape, requires_grad).unwrap();
        let xd = tape.leaf(x_d.to_vec(), &shape, false).unwrap();
        let bound = net.bind(&mut tape, |_| false).unwrap();
        let feat = bound.forward_features(&mut tape, xr, xd).unwrap();
        (tape, feat)
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_bottleneck() {
        let net = MddNetwork::new(toy_config(), 3);
        let n = 4 * 8;
        let (tape, feat) = forward_on(&net, &vec![0.0; n], &vec![0.0; n], false);
        assert!(tape.data(feat).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feature_width_is_bottleneck() {
        let net = MddNetwork::new(toy_config(), 7);
        let mut rng = Xoshiro256::seed_from_u64(1);
        let x: Vec<f64> = (0..32).map(|_| rng.next_f64()).collect();
        let (tape, feat) = forward_on(&net, &x, &x, false);
        assert_eq!(tape.shape(feat), &[1, 8]);
    }

    #[test]
    fn psi_gradient_check_on_toy_input() {
        let net = MddNetwork::new(toy_config(), 5);
        let mut rng = Xoshiro256::seed_from_u64(2);
        let x: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xd: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let err = grad_check(
            |tape, xr| {
                let xr = tape.reshape(xr, &[1, 1, 4, 8])?;
                let xdv = tape.leaf(xd.clone(), &[1, 1, 4, 8], false)?;
                let bound = net.bind(tape, |_| false)?;
                let feat = bound.forward_features(tape, xr, xdv)?;
                Ok(tape.sum(feat))
            },
            &x,
            &[32],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn psi_gradient_check_wrt_weights() {
        let net = MddNetwork::new(toy_config(), 9);
        let mut rng = Xoshiro256::seed_from_u64(3);
        let x: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w0 = net.psi.branch_r[0].weight.clone();
        let err = grad_check(
            |tape, wv| {
                let mut probe = net.clone();
                probe.psi.branch_r[0].weight = tape.data(wv).to_vec();
                let xr = tape.leaf(x.clone(), &[1, 1, 4, 8], false)?;
                let xd = tape.leaf(x.clone(), &[1, 1, 4, 8], false)?;
                let bound = probe.bind(tape, |_| false)?;
                // Re-route the first conv weight through the checked leaf so
                // the gradient flows to it.
                let mut vars = bound.vars.clone();
                let wshaped = tape.reshape(wv, &[2, 1, 3, 3])?;
                vars[0] = wshaped;
                let bound = BoundNetwork { vars, ..bound };
                let feat = bound.forward_features(tape, xr, xd)?;
                let scores = bound.forward_f(tape, feat)?;
                Ok(tape.sum(scores))
            },
            &w0,
            &[w0.len()],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 0.9, 0.3]), 2);
        assert_eq!(predict(&[1.0, 1.0, 1.0]), 1);
        assert_eq!(predict(&[5.0, 5.0, 6.0]), 3);
        // invariant under adding a constant
        assert_eq!(predict(&[5.0 + 3.3, 5.0 + 3.3, 6.0 + 3.3]), 3);
    }

    #[test]
    fn grl_sign_flip() {
        // With GRL active, psi-side gradients are the eta-scaled negation
        // of the gradients without GRL.
        let net = MddNetwork::new(toy_config(), 4);
        let mut rng = Xoshiro256::seed_from_u64(5);
        let x: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let grads = |eta: Option<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let xr = tape.leaf(x.clone(), &[1, 1, 4, 8], false).unwrap();
            let xd = tape.leaf(x.clone(), &[1, 1, 4, 8], false).unwrap();
            let bound = net.bind(&mut tape, |p| p == Part::Psi).unwrap();
            let feat = bound.forward_features(&mut tape, xr, xd).unwrap();
            let feat = match eta {
                Some(e) => grl_apply(&mut tape, feat, e).unwrap(),
                None => feat,
            };
            let scores = bound.forward_f_adv(&mut tape, feat).unwrap();
            let loss = tape.lse_loss(scores, &[1]).unwrap();
            let loss = tape.sum(loss);
            tape.backward(loss).unwrap();
            tape.grad(bound.vars[0]).unwrap().to_vec()
        };
        let plain = grads(None);
        let reversed = grads(Some(1.0));
        assert!(plain.iter().any(|g| *g != 0.0));
        for (a, b) in plain.iter().zip(&reversed) {
            assert!((a + b).abs() < 1e-12);
        }
        // eta = 0 blocks the adversarial path into psi entirely
        let blocked = grads(Some(0.0));
        assert!(blocked.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn heads_have_disjoint_parameters() {
        let net = MddNetwork::new(toy_config(), 6);
        let mut tape = Tape::new();
        let x: Vec<f64> = vec![0.5; 32];
        let xr = tape.leaf(x.clone(), &[1, 1, 4, 8], false).unwrap();
        let xd = tape.leaf(x, &[1, 1, 4, 8], false).unwrap();
        let bound = net.bind(&mut tape, |_| true).unwrap();
        let feat = bound.forward_features(&mut tape, xr, xd).unwrap();
        let scores = bound.forward_f(&mut tape, feat).unwrap();
        let loss = tape.lse_loss(scores, &[2]).unwrap();
        let loss = tape.sum(loss);
        tape.backward(loss).unwrap();
        // A loss through f leaves every f_adv gradient at zero.
        for (i, v) in bound.vars.iter().enumerate() {
            if net.part_of(i) == Part::FAdv {
                assert!(tape.grad(*v).unwrap().iter().all(|g| *g == 0.0));
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = MddNetwork::new(toy_config(), 42);
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(net.params(), loaded.params());
        assert_eq!(net.config, loaded.config);

        // truncation
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(MddError::Format(_))));

        // magic mismatch
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let badp = path.with_extension("bad");
        std::fs::write(&badp, &bad).unwrap();
        assert!(matches!(load_checkpoint(&badp), Err(MddError::Format(_))));
    }
}
