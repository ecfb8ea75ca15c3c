use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{FusionTopology, ModelError, Result, Strategy};
use crate::tensor::{softmax_channels, Element, Param, Tape, Tensor, Var};

/// Skip features indexed by resolution exponent.
type Skips<'t, T> = Vec<Option<Var<'t, T>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Lidar,
}

struct Conv<T> {
    weight: Param<T>,
    bias: Param<T>,
}

impl<T: Element> Conv<T> {
    fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        Ok(x.conv2d(
            tape.param(&self.weight),
            Some(tape.param(&self.bias)),
            stride,
            padding,
        )?)
    }

    fn forward_transposed<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.conv_transpose2d(
            tape.param(&self.weight),
            Some(tape.param(&self.bias)),
            2,
            1,
            1,
        )?)
    }
}

struct Block<T> {
    conv1: Conv<T>,
    conv2: Conv<T>,
}

impl<T: Element> Block<T> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.conv1.forward(tape, x, 1, 1)?.relu();
        Ok(self.conv2.forward(tape, h, 1, 1)?.add(x)?.relu())
    }
}

/// Stem, residual stages and the 1x1 transitions between them.
struct Branch<T> {
    stem: Conv<T>,
    transitions: Vec<Conv<T>>,
    stages: Vec<Vec<Block<T>>>,
}

impl<T: Element> Branch<T> {
    fn stem<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.stem.forward(tape, x, 2, 1)?.relu())
    }

    /// Channel transition into stage `s` (s >= 1).
    fn transition<'t>(&self, tape: &'t Tape<T>, s: usize, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.transitions[s - 1].forward(tape, x, 1, 0)?.relu())
    }

    fn block<'t>(
        &self,
        tape: &'t Tape<T>,
        s: usize,
        j: usize,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.stages[s][j].forward(tape, x)
    }

    /// Runs the branch alone; returns the encoder output and the skip
    /// features indexed by resolution exponent.
    fn encode<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Skips<'t, T>)> {
        let stages = self.stages.len();
        let mut skips = vec![None; stages + 1];
        let mut f = self.stem(tape, x)?;
        for s in 0..stages {
            if s > 0 {
                f = self.transition(tape, s, f)?;
            }
            for j in 0..self.stages[s].len() {
                f = self.block(tape, s, j, f)?;
            }
            if s == 0 {
                skips[1] = Some(f);
            }
            f = f.maxpool2d()?;
            if s + 2 <= stages {
                skips[s + 2] = Some(f);
            }
        }
        Ok((f, skips))
    }
}

struct Decoder<T> {
    levels: Vec<Conv<T>>,
    classifier: Conv<T>,
}

/// Learnable fusion scalars of a two-stream network.
struct Fusion<T> {
    /// Per stage, `[j - 1][k - 1]`: LiDAR map `k - 1` into camera block `j`.
    lid_to_rgb: Vec<Vec<Vec<Param<T>>>>,
    /// Per stage, `[j - 1][k - 1]`: camera map `k - 1` into LiDAR block `j`.
    rgb_to_lid: Vec<Vec<Vec<Param<T>>>>,
    g_rgb: Param<T>,
    g_lid: Param<T>,
    dec_rgb: Vec<Param<T>>,
    dec_lid: Vec<Param<T>>,
}

/// Logits and road confidence of a forward pass.
#[derive(Clone, Debug)]
pub struct NetworkOutput<T> {
    /// `[N, 2, H, W]`.
    pub logits: Tensor<T>,
    /// Softmax probability of the road class, `[N, 1, H, W]`.
    pub confidence: Tensor<T>,
}

/// Two-stream road segmentation network.
pub struct SkipcrossNet<T> {
    topology: FusionTopology,
    primary: Branch<T>,
    lidar: Option<Branch<T>>,
    decoder: Decoder<T>,
    lidar_decoder: Option<Decoder<T>>,
    fusion: Option<Fusion<T>>,
    registry: Vec<(String, Param<T>)>,
    index: HashMap<String, usize>,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    registry: Vec<(String, Param<T>)>,
}

impl<T: Element> Builder<T> {
    fn register(&mut self, name: String, value: Tensor<T>, trainable: bool) -> Param<T> {
        let p = Param::new(value);
        p.set_trainable(trainable);
        self.registry.push((name, p.clone()));
        p
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            T::from_f64(std * rng.sample::<f64, _>(StandardNormal))
        })
    }

    /// `k x k` convolution, zero-mean normal weights with std
    /// `gain * sqrt(2 / fan_in)`, zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Conv<T> {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        let w = self.normal(&[cout, cin, k, k], std);
        Conv {
            weight: self.register(format!("{name}.weight"), w, true),
            bias: self.register(format!("{name}.bias"), Tensor::zeros(&[cout]), true),
        }
    }

    /// 3x3 stride-2 transposed convolution; each output pixel sees about
    /// `cin * 9 / 4` inputs.
    fn tconv(&mut self, name: &str, cin: usize, cout: usize) -> Conv<T> {
        let std = (2.0 / (cin as f64 * 9.0 / 4.0)).sqrt();
        let w = self.normal(&[cin, cout, 3, 3], std);
        Conv {
            weight: self.register(format!("{name}.weight"), w, true),
            bias: self.register(format!("{name}.bias"), Tensor::zeros(&[cout]), true),
        }
    }

    fn scalar(&mut self, name: String, value: f64, trainable: bool) -> Param<T> {
        self.register(name, Tensor::scalar(T::from_f64(value)), trainable)
    }

    fn branch(&mut self, prefix: &str, in_channels: usize, topo: &FusionTopology) -> Branch<T> {
        let total_blocks: usize = topo.stage_blocks.iter().sum();
        let residual_gain = 1.0 / (total_blocks as f64).sqrt();
        let c0 = topo.stage_channels[0];
        let stem = self.conv(&format!("{prefix}.stem"), in_channels, c0, 3, 1.0);
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        for (s, (&blocks, &ch)) in topo
            .stage_blocks
            .iter()
            .zip(&topo.stage_channels)
            .enumerate()
        {
            if s > 0 {
                let prev = topo.stage_channels[s - 1];
                transitions.push(self.conv(
                    &format!("{prefix}.transition{}", s + 1),
                    prev,
                    ch,
                    1,
                    1.0,
                ));
            }
            let stage = (0..blocks)
                .map(|j| {
                    let name = format!("{prefix}.stage{}.block{}", s + 1, j + 1);
                    Block {
                        conv1: self.conv(&format!("{name}.conv1"), ch, ch, 3, 1.0),
                        conv2: self.conv(&format!("{name}.conv2"), ch, ch, 3, residual_gain),
                    }
                })
                .collect();
            stages.push(stage);
        }
        Branch {
            stem,
            transitions,
            stages,
        }
    }

    fn decoder(&mut self, prefix: &str, topo: &FusionTopology) -> Decoder<T> {
        let channels = decoder_channels(topo);
        let mut cin = *topo.stage_channels.last().unwrap();
        let mut levels = Vec::new();
        for (i, &cout) in channels.iter().enumerate() {
            levels.push(self.tconv(&format!("{prefix}.level{}", i + 1), cin, cout));
            cin = cout;
        }
        let classifier = self.conv(&format!("{prefix}.classifier"), cin, 2, 1, 1.0);
        Decoder { levels, classifier }
    }

    fn fusion(&mut self, topo: &FusionTopology) -> Fusion<T> {
        let mut lid_to_rgb = Vec::new();
        let mut rgb_to_lid = Vec::new();
        for (s, &blocks) in topo.stage_blocks.iter().enumerate() {
            let mut table = |tag: &str| -> Vec<Vec<Param<T>>> {
                (1..=blocks)
                    .map(|j| {
                        (1..=j)
                            .map(|k| {
                                let name = format!("fusion.stage{}.{tag}.k{k}j{j}", s + 1);
                                self.scalar(name, 0.0, topo.connection_enabled(s, k, j))
                            })
                            .collect()
                    })
                    .collect()
            };
            lid_to_rgb.push(table("L"));
            rgb_to_lid.push(table("R"));
        }
        let g_rgb = self.scalar("fusion.g_rgb".into(), 0.5, true);
        let g_lid = self.scalar("fusion.g_lid".into(), 0.5, true);
        let stages = topo.stages();
        let on = topo.decoder_fusion_enabled;
        let dec_rgb = (0..stages)
            .map(|i| self.scalar(format!("decoder.level{}.s_rgb", i + 1), 0.0, on))
            .collect();
        let dec_lid = (0..stages)
            .map(|i| self.scalar(format!("decoder.level{}.s_lid", i + 1), 0.0, on))
            .collect();
        Fusion {
            lid_to_rgb,
            rgb_to_lid,
            g_rgb,
            g_lid,
            dec_rgb,
            dec_lid,
        }
    }
}

/// Output channels of the transposed convolutions: level `i` matches the
/// encoder feature at resolution exponent `S - i`; the last level halves
/// the first stage width.
fn decoder_channels(topo: &FusionTopology) -> Vec<usize> {
    let s = topo.stages();
    let c = &topo.stage_channels;
    (0..=s)
        .map(|i| match s - i {
            0 => (c[0] / 2).max(1),
            1 => c[0],
            m => c[m - 2],
        })
        .collect()
}

/// In-stage fusion recurrence shared by both streams.
///
/// With `F_0` the stage inputs, block `j` (1-based) of each stream computes
/// `F_j = block(F_{j-1}) + sum_{k=1..j} w_kj * G_{k-1}` where `G` are the
/// maps of the other stream. `weight(target, k, j)` returns the scalar for a
/// connection into `target`, or `None` when it is disabled. Returns the last
/// maps of both streams.
pub fn fuse_stage<'t, T: Element>(
    rgb: Var<'t, T>,
    lid: Var<'t, T>,
    blocks: usize,
    mut block: impl FnMut(Modality, usize, Var<'t, T>) -> Result<Var<'t, T>>,
    mut weight: impl FnMut(Modality, usize, usize) -> Option<Var<'t, T>>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let mut fr = vec![rgb];
    let mut fl = vec![lid];
    for j in 1..=blocks {
        let mut r = block(Modality::Rgb, j - 1, fr[j - 1])?;
        let mut l = block(Modality::Lidar, j - 1, fl[j - 1])?;
        for k in 1..=j {
            if let Some(w) = weight(Modality::Rgb, k, j) {
                r = r.scale_add(w, fl[k - 1])?;
            }
            if let Some(w) = weight(Modality::Lidar, k, j) {
                l = l.scale_add(w, fr[k - 1])?;
            }
        }
        fr.push(r);
        fl.push(l);
    }
    Ok((fr[blocks], fl[blocks]))
}

impl<T: Element> SkipcrossNet<T> {
    /// Builds a network with parameters drawn deterministically from `seed`.
    pub fn build(topology: &FusionTopology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let topo = topology.clone();
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            registry: Vec::new(),
        };
        let (primary, lidar) = match topo.strategy {
            Strategy::Early => (
                b.branch(
                    "early",
                    topo.rgb_in_channels + topo.lidar_in_channels,
                    &topo,
                ),
                None,
            ),
            Strategy::Camera => (b.branch("rgb", topo.rgb_in_channels, &topo), None),
            _ => {
                let rgb = b.branch("rgb", topo.rgb_in_channels, &topo);
                (rgb, Some(b.branch("lid", topo.lidar_in_channels, &topo)))
            }
        };
        let (decoder, lidar_decoder) = if topo.strategy == Strategy::Late {
            (
                b.decoder("rgb_decoder", &topo),
                Some(b.decoder("lid_decoder", &topo)),
            )
        } else {
            (b.decoder("decoder", &topo), None)
        };
        let fusion = topo.strategy.is_fused_two_stream().then(|| b.fusion(&topo));
        let registry = b.registry;
        let index = registry
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Ok(Self {
            topology: topo,
            primary,
            lidar,
            decoder,
            lidar_decoder,
            fusion,
            registry,
            index,
        })
    }

    pub fn topology(&self) -> &FusionTopology {
        &self.topology
    }

    /// All parameters in registration order.
    pub fn params(&self) -> &[(String, Param<T>)] {
        &self.registry
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.registry[i].1)
    }

    pub fn trainable_params(&self) -> Vec<Param<T>> {
        self.registry
            .iter()
            .filter(|(_, p)| p.is_trainable())
            .map(|(_, p)| p.clone())
            .collect()
    }

    /// Total scalar count over every registered tensor.
    pub fn param_count(&self) -> usize {
        self.registry.iter().map(|(_, p)| p.numel()).sum()
    }

    /// Encoder cross scalars (`fusion.stage*`), trainable or not.
    pub fn cross_scalars(&self) -> Vec<(&str, &Param<T>)> {
        self.registry
            .iter()
            .filter(|(n, _)| n.starts_with("fusion.stage"))
            .map(|(n, p)| (n.as_str(), p))
            .collect()
    }

    pub fn zero_grad(&self) {
        self.registry.iter().for_each(|(_, p)| p.zero_grad());
    }

    pub fn set_param(&self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .param(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        Ok(p.set_value(value)?)
    }

    /// Copies values of every same-named parameter of `other`; returns how
    /// many were copied.
    pub fn copy_params_from(&self, other: &SkipcrossNet<T>) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in &self.registry {
            if let Some(src) = other.param(name) {
                p.set_value((*src.value()).clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.registry
            .iter()
            .map(|(_, p)| (*p.value()).clone())
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor<T>]) -> Result<()> {
        assert_eq!(
            snapshot.len(),
            self.registry.len(),
            "snapshot of another network"
        );
        for ((_, p), v) in self.registry.iter().zip(snapshot) {
            p.set_value(v.clone())?;
        }
        Ok(())
    }

    fn check_inputs(&self, rgb: &Tensor<T>, adi: &Tensor<T>) -> Result<()> {
        let (n, c, h, w) = rgb.dims4("forward")?;
        if c != self.topology.rgb_in_channels {
            return Err(ModelError::InputShape {
                what: "camera input",
                expected: vec![n, self.topology.rgb_in_channels, h, w],
                got: rgb.shape().to_vec(),
            });
        }
        let expected = vec![n, self.topology.lidar_in_channels, h, w];
        if adi.shape() != expected.as_slice() {
            return Err(ModelError::InputShape {
                what: "ADI input",
                expected,
                got: adi.shape().to_vec(),
            });
        }
        let d = self.topology.downsampling();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(ModelError::Indivisible {
                height: h,
                width: w,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns `[N, 2, H, W]` logits.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        rgb: &Tensor<T>,
        adi: &Tensor<T>,
    ) -> Result<Var<'t, T>> {
        self.check_inputs(rgb, adi)?;
        match self.topology.strategy {
            Strategy::Camera => {
                let (e, _) = self.primary.encode(tape, tape.constant(rgb.clone()))?;
                self.decode(tape, &self.decoder, e, None)
            }
            Strategy::Early => {
                let x = concat_channels(rgb, adi);
                let (e, _) = self.primary.encode(tape, tape.constant(x))?;
                self.decode(tape, &self.decoder, e, None)
            }
            Strategy::Late => {
                let lidar = self.lidar.as_ref().expect("late fusion has a LiDAR branch");
                let lidar_decoder = self
                    .lidar_decoder
                    .as_ref()
                    .expect("late fusion has two decoders");
                let (er, _) = self.primary.encode(tape, tape.constant(rgb.clone()))?;
                let (el, _) = lidar.encode(tape, tape.constant(adi.clone()))?;
                let a = self.decode(tape, &self.decoder, er, None)?;
                let b = self.decode(tape, lidar_decoder, el, None)?;
                Ok(a.add(b)?.mul_const(T::from_f64(0.5)))
            }
            Strategy::Skipcross | Strategy::Middle | Strategy::Cross => {
                self.forward_fused(tape, rgb, adi)
            }
        }
    }

    fn forward_fused<'t>(
        &self,
        tape: &'t Tape<T>,
        rgb: &Tensor<T>,
        adi: &Tensor<T>,
    ) -> Result<Var<'t, T>> {
        let fusion = self
            .fusion
            .as_ref()
            .expect("fused strategy has fusion scalars");
        let rb = &self.primary;
        let lb = self
            .lidar
            .as_ref()
            .expect("fused strategy has a LiDAR branch");
        let topo = &self.topology;
        let stages = topo.stages();
        let mut skips_r = vec![None; stages + 1];
        let mut skips_l = vec![None; stages + 1];
        let mut r = rb.stem(tape, tape.constant(rgb.clone()))?;
        let mut l = lb.stem(tape, tape.constant(adi.clone()))?;
        for s in 0..stages {
            if s > 0 {
                r = rb.transition(tape, s, r)?;
                l = lb.transition(tape, s, l)?;
            }
            (r, l) = fuse_stage(
                r,
                l,
                topo.stage_blocks[s],
                |m, j, x| match m {
                    Modality::Rgb => rb.block(tape, s, j, x),
                    Modality::Lidar => lb.block(tape, s, j, x),
                },
                |m, k, j| {
                    if !topo.connection_enabled(s, k, j) {
                        return None;
                    }
                    let table = match m {
                        Modality::Rgb => &fusion.lid_to_rgb,
                        Modality::Lidar => &fusion.rgb_to_lid,
                    };
                    Some(tape.param(&table[s][j - 1][k - 1]))
                },
            )?;
            if s == 0 {
                skips_r[1] = Some(r);
                skips_l[1] = Some(l);
            }
            r = r.maxpool2d()?;
            l = l.maxpool2d()?;
            if s + 2 <= stages {
                skips_r[s + 2] = Some(r);
                skips_l[s + 2] = Some(l);
            }
        }
        let e = r
            .scale(tape.param(&fusion.g_rgb))?
            .scale_add(tape.param(&fusion.g_lid), l)?;
        let skips =
            topo.decoder_fusion_enabled
                .then_some((skips_r.as_slice(), skips_l.as_slice(), fusion));
        self.decode(tape, &self.decoder, e, skips)
    }

    #[allow(clippy::type_complexity)]
    fn decode<'t>(
        &self,
        tape: &'t Tape<T>,
        decoder: &Decoder<T>,
        e: Var<'t, T>,
        skips: Option<(&[Option<Var<'t, T>>], &[Option<Var<'t, T>>], &Fusion<T>)>,
    ) -> Result<Var<'t, T>> {
        let stages = self.topology.stages();
        let mut d = e;
        for (i, level) in decoder.levels.iter().enumerate() {
            d = level.forward_transposed(tape, d)?;
            if let (Some((sr, sl, fusion)), true) = (skips, i < stages) {
                let m = stages - i;
                let a = sr[m]
                    .expect("skip feature")
                    .scale(tape.param(&fusion.dec_rgb[i]))?;
                let b = sl[m]
                    .expect("skip feature")
                    .scale(tape.param(&fusion.dec_lid[i]))?;
                d = d.add(a.add(b)?)?;
            }
            d = d.relu();
        }
        decoder.classifier.forward(tape, d, 1, 0)
    }

    /// Inference without gradient bookkeeping beyond a throwaway tape.
    pub fn predict(&self, rgb: &Tensor<T>, adi: &Tensor<T>) -> Result<NetworkOutput<T>> {
        let tape = Tape::new();
        let logits = (*self.forward(&tape, rgb, adi)?.value()).clone();
        let probs = softmax_channels(&logits)?;
        let (n, _, h, w) = logits.dims4("predict")?;
        let plane = h * w;
        let mut conf = Vec::with_capacity(n * plane);
        for b in 0..n {
            conf.extend_from_slice(&probs.data()[(2 * b + 1) * plane..(2 * b + 2) * plane]);
        }
        Ok(NetworkOutput {
            logits,
            confidence: Tensor::new(&[n, 1, h, w], conf)?,
        })
    }
}

fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = a.dims4("concat").expect("checked");
    let cb = b.shape()[1];
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(&[n, ca + cb, h, w], data).expect("consistent extents")
}
