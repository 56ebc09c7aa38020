//! The three computation graphs: ResNet-style generator, PatchGAN
//! discriminator, and SegNet segmenter, with explicit shape contracts and
//! deterministic seeded initialization.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_dim, Scalar, Tape, Var};
use crate::{CoreError, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
/// GAN-conventional zero-mean Gaussian init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub residual_blocks: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            in_channels: 3,
            out_channels: 3,
            base_channels: 64,
            residual_blocks: 9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    /// First-layer width of the 70x70-receptive-field ladder
    /// base -> 2base -> 4base -> 8base -> 1.
    pub base_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            in_channels: 3,
            base_channels: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SegmenterSpec {
    pub in_channels: usize,
    pub classes: usize,
    /// VGG16-style ladder base, 2base, 4base, 8base, 8base.
    pub base_channels: usize,
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        SegmenterSpec {
            in_channels: 3,
            classes: 2,
            base_channels: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum ArchDescriptor {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
    Segmenter(SegmenterSpec),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum Mode {
    Trainable,
    Frozen,
}

#[derive(Clone, Debug)]
pub struct NamedParam<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// A parameterized differentiable function: architecture descriptor plus a
/// flat named parameter collection.
#[derive(Clone, Debug)]
pub struct ModelGraph<F: Scalar> {
    pub arch: ArchDescriptor,
    pub params: Vec<NamedParam<F>>,
    pub mode: Mode,
}

impl<F: Scalar> ModelGraph<F> {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.mode = Mode::Frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.mode == Mode::Frozen
    }

    pub fn cast<G: Scalar>(&self) -> ModelGraph<G> {
        ModelGraph {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    value: p.value.mapv(|v| G::from_f64(v.to_f64())),
                })
                .collect(),
            mode: self.mode,
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization

struct ParamBuilder<F: Scalar> {
    rng: ChaCha8Rng,
    params: Vec<NamedParam<F>>,
}

impl<F: Scalar> ParamBuilder<F> {
    fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        }
    }

    /// Sampling happens in f64 so f32 and f64 builds of the same seed hold
    /// the same values up to rounding.
    fn gaussian(&mut self, name: &str, shape: &[usize]) {
        let dist = Normal::new(0.0f64, INIT_STD).unwrap();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            F::from_f64(dist.sample(&mut self.rng))
        });
        self.params.push(NamedParam {
            name: name.to_string(),
            value,
        });
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) {
        self.params.push(NamedParam {
            name: name.to_string(),
            value: ArrayD::from_elem(IxDyn(shape), F::from_f64(v)),
        });
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) {
        self.gaussian(&format!("{name}.weight"), &[out_c, in_c, k, k]);
        self.constant(&format!("{name}.bias"), &[out_c], 0.0);
    }

    fn conv_t(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) {
        self.gaussian(&format!("{name}.weight"), &[in_c, out_c, k, k]);
        self.constant(&format!("{name}.bias"), &[out_c], 0.0);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.constant(&format!("{name}.gamma"), &[c], 1.0);
        self.constant(&format!("{name}.beta"), &[c], 0.0);
    }
}

pub fn build_generator<F: Scalar>(spec: &GeneratorSpec, seed: u64) -> Result<ModelGraph<F>> {
    if spec.base_channels < 1 {
        return Err(CoreError::Config("base_channels must be >= 1".into()));
    }
    let b = spec.base_channels;
    let mut pb = ParamBuilder::new(seed);
    pb.conv("stem", b, spec.in_channels, 7);
    pb.norm("stem_norm", b);
    pb.conv("down1", 2 * b, b, 3);
    pb.norm("down1_norm", 2 * b);
    pb.conv("down2", 4 * b, 2 * b, 3);
    pb.norm("down2_norm", 4 * b);
    for i in 0..spec.residual_blocks {
        pb.conv(&format!("res{i}.conv1"), 4 * b, 4 * b, 3);
        pb.norm(&format!("res{i}.norm1"), 4 * b);
        pb.conv(&format!("res{i}.conv2"), 4 * b, 4 * b, 3);
        pb.norm(&format!("res{i}.norm2"), 4 * b);
    }
    pb.conv_t("up1", 4 * b, 2 * b, 3);
    pb.norm("up1_norm", 2 * b);
    pb.conv_t("up2", 2 * b, b, 3);
    pb.norm("up2_norm", b);
    pb.conv("head", spec.out_channels, b, 7);
    Ok(ModelGraph {
        arch: ArchDescriptor::Generator(spec.clone()),
        params: pb.params,
        mode: Mode::Trainable,
    })
}

pub fn build_discriminator<F: Scalar>(
    spec: &DiscriminatorSpec,
    seed: u64,
) -> Result<ModelGraph<F>> {
    if spec.base_channels < 1 {
        return Err(CoreError::Config("base_channels must be >= 1".into()));
    }
    let b = spec.base_channels;
    let mut pb = ParamBuilder::new(seed);
    pb.conv("layer0", b, spec.in_channels, 4);
    pb.conv("layer1", 2 * b, b, 4);
    pb.norm("layer1_norm", 2 * b);
    pb.conv("layer2", 4 * b, 2 * b, 4);
    pb.norm("layer2_norm", 4 * b);
    pb.conv("layer3", 8 * b, 4 * b, 4);
    pb.norm("layer3_norm", 8 * b);
    pb.conv("layer4", 1, 8 * b, 4);
    Ok(ModelGraph {
        arch: ArchDescriptor::Discriminator(spec.clone()),
        params: pb.params,
        mode: Mode::Trainable,
    })
}

/// VGG16-style encoder stage widths for a given base width.
fn segnet_ladder(b: usize) -> [usize; 5] {
    [b, 2 * b, 4 * b, 8 * b, 8 * b]
}

/// Convs per encoder stage (13 total); the decoder mirrors it.
const SEGNET_STAGE_CONVS: [usize; 5] = [2, 2, 3, 3, 3];

pub fn build_segmenter<F: Scalar>(spec: &SegmenterSpec, seed: u64) -> Result<ModelGraph<F>> {
    if spec.base_channels < 1 {
        return Err(CoreError::Config("base_channels must be >= 1".into()));
    }
    let ladder = segnet_ladder(spec.base_channels);
    let mut pb = ParamBuilder::new(seed);
    let mut in_c = spec.in_channels;
    for (stage, (&width, &n_convs)) in ladder.iter().zip(SEGNET_STAGE_CONVS.iter()).enumerate() {
        for ci in 0..n_convs {
            pb.conv(&format!("enc{stage}.conv{ci}"), width, in_c, 3);
            pb.norm(&format!("enc{stage}.norm{ci}"), width);
            in_c = width;
        }
    }
    // Decoder stages run in reverse; the very last conv is the pixel
    // classifier and carries no norm.
    for stage in (0..5).rev() {
        let n_convs = SEGNET_STAGE_CONVS[stage];
        let target = if stage == 0 {
            spec.classes
        } else {
            ladder[stage - 1]
        };
        for ci in 0..n_convs {
            let last = ci == n_convs - 1;
            let out_c = if last { target } else { ladder[stage] };
            let is_classifier = stage == 0 && last;
            pb.conv(&format!("dec{stage}.conv{ci}"), out_c, in_c, 3);
            if !is_classifier {
                pb.norm(&format!("dec{stage}.norm{ci}"), out_c);
            }
            in_c = out_c;
        }
    }
    Ok(ModelGraph {
        arch: ArchDescriptor::Segmenter(spec.clone()),
        params: pb.params,
        mode: Mode::Trainable,
    })
}

// ---------------------------------------------------------------------------
// Forward passes

/// A model bound to a tape: parameter leaves are registered once, so
/// repeated forwards share them and gradients accumulate.
pub struct BoundModel<'m, F: Scalar> {
    pub graph: &'m ModelGraph<F>,
    pub param_vars: Vec<Var>,
}

impl<F: Scalar> ModelGraph<F> {
    pub fn bind<'m>(&'m self, tape: &Tape<F>) -> BoundModel<'m, F> {
        let requires_grad = self.mode == Mode::Trainable;
        let param_vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect();
        BoundModel {
            graph: self,
            param_vars,
        }
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    i: usize,
}

impl<'a> Cursor<'a> {
    fn next2(&mut self) -> (Var, Var) {
        let pair = (self.vars[self.i], self.vars[self.i + 1]);
        self.i += 2;
        pair
    }
}

fn conv_block<F: Scalar>(
    tape: &Tape<F>,
    cur: &mut Cursor,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let (w, b) = cur.next2();
    tape.conv2d(x, w, b, stride, pad)
}

fn conv_t_block<F: Scalar>(tape: &Tape<F>, cur: &mut Cursor, x: Var) -> Var {
    let (w, b) = cur.next2();
    tape.conv_transpose2d(x, w, b, 2, 1, 1)
}

fn norm_block<F: Scalar>(tape: &Tape<F>, cur: &mut Cursor, x: Var) -> Var {
    let (g, b) = cur.next2();
    tape.instance_norm(x, g, b, F::from_f64(INSTANCE_NORM_EPS))
}

impl<'m, F: Scalar> BoundModel<'m, F> {
    /// Runs the architecture-specific forward pass. Input is [n,c,h,w];
    /// shape preconditions are enforced per architecture.
    pub fn forward(&self, tape: &Tape<F>, input: Var) -> Result<Var> {
        let shape = tape.shape(input);
        if shape.len() != 4 {
            return Err(CoreError::Shape(format!(
                "expected [n,c,h,w] input, got {shape:?}"
            )));
        }
        match &self.graph.arch {
            ArchDescriptor::Generator(spec) => self.forward_generator(tape, input, spec),
            ArchDescriptor::Discriminator(_) => self.forward_discriminator(tape, input, &shape),
            ArchDescriptor::Segmenter(spec) => self.forward_segmenter(tape, input, spec, &shape),
        }
    }

    fn forward_generator(&self, tape: &Tape<F>, input: Var, spec: &GeneratorSpec) -> Result<Var> {
        let shape = tape.shape(input);
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(CoreError::Shape(format!(
                "generator input dims must be divisible by 4, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let mut cur = Cursor {
            vars: &self.param_vars,
            i: 0,
        };
        let mut x = conv_block(tape, &mut cur, input, 1, 3);
        x = norm_block(tape, &mut cur, x);
        x = tape.relu(x);
        x = conv_block(tape, &mut cur, x, 2, 1);
        x = norm_block(tape, &mut cur, x);
        x = tape.relu(x);
        x = conv_block(tape, &mut cur, x, 2, 1);
        x = norm_block(tape, &mut cur, x);
        x = tape.relu(x);
        for _ in 0..spec.residual_blocks {
            let skip = x;
            let mut y = conv_block(tape, &mut cur, x, 1, 1);
            y = norm_block(tape, &mut cur, y);
            y = tape.relu(y);
            y = conv_block(tape, &mut cur, y, 1, 1);
            y = norm_block(tape, &mut cur, y);
            x = tape.add(skip, y);
        }
        x = conv_t_block(tape, &mut cur, x);
        x = norm_block(tape, &mut cur, x);
        x = tape.relu(x);
        x = conv_t_block(tape, &mut cur, x);
        x = norm_block(tape, &mut cur, x);
        x = tape.relu(x);
        x = conv_block(tape, &mut cur, x, 1, 3);
        Ok(tape.tanh(x))
    }

    fn forward_discriminator(&self, tape: &Tape<F>, input: Var, shape: &[usize]) -> Result<Var> {
        if shape[2] < 16 || shape[3] < 16 {
            return Err(CoreError::Shape(format!(
                "discriminator input must be at least 16x16 to survive the stride ladder, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let slope = F::from_f64(LEAKY_SLOPE);
        let mut cur = Cursor {
            vars: &self.param_vars,
            i: 0,
        };
        let mut x = conv_block(tape, &mut cur, input, 2, 1);
        x = tape.leaky_relu(x, slope);
        for stride in [2, 2, 1] {
            x = conv_block(tape, &mut cur, x, stride, 1);
            x = norm_block(tape, &mut cur, x);
            x = tape.leaky_relu(x, slope);
        }
        Ok(conv_block(tape, &mut cur, x, 1, 1))
    }

    fn forward_segmenter(
        &self,
        tape: &Tape<F>,
        input: Var,
        spec: &SegmenterSpec,
        shape: &[usize],
    ) -> Result<Var> {
        if shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(CoreError::Shape(format!(
                "segmenter input dims must be divisible by 32 (5 pooling stages), got {}x{}",
                shape[2], shape[3]
            )));
        }
        let _ = spec;
        let mut cur = Cursor {
            vars: &self.param_vars,
            i: 0,
        };
        let mut x = input;
        let mut pool_indices = Vec::with_capacity(5);
        for &n_convs in SEGNET_STAGE_CONVS.iter() {
            for _ in 0..n_convs {
                x = conv_block(tape, &mut cur, x, 1, 1);
                x = norm_block(tape, &mut cur, x);
                x = tape.relu(x);
            }
            x = tape.max_pool2(x);
            pool_indices.push(tape.pool_indices(x));
        }
        for stage in (0..5).rev() {
            x = tape.max_unpool2(x, &pool_indices[stage]);
            let n_convs = SEGNET_STAGE_CONVS[stage];
            for ci in 0..n_convs {
                let is_classifier = stage == 0 && ci == n_convs - 1;
                x = conv_block(tape, &mut cur, x, 1, 1);
                if !is_classifier {
                    x = norm_block(tape, &mut cur, x);
                    x = tape.relu(x);
                }
            }
        }
        Ok(x)
    }

    /// Collects this model's parameter gradients from a backward pass,
    /// zero-filled where no gradient reached a parameter.
    pub fn gradients(&self, grads: &[Option<ArrayD<F>>]) -> Vec<ArrayD<F>> {
        self.param_vars
            .iter()
            .zip(self.graph.params.iter())
            .map(|(v, p)| match &grads[v.0] {
                Some(g) => g.clone(),
                None => ArrayD::zeros(p.value.raw_dim()),
            })
            .collect()
    }
}

/// Patch-map spatial dims for the discriminator's k=4, p=1 ladder with
/// strides 2,2,2,1,1.
pub fn discriminator_patch_dims(h: usize, w: usize) -> (usize, usize) {
    let mut dims = (h, w);
    for stride in [2, 2, 2, 1, 1] {
        dims = (
            conv_out_dim(dims.0, 4, stride, 1),
            conv_out_dim(dims.1, 4, stride, 1),
        );
    }
    dims
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn zeros(shape: &[usize]) -> ArrayD<f32> {
        ArrayD::zeros(IxDyn(shape))
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let spec = GeneratorSpec {
            base_channels: 4,
            ..Default::default()
        };
        let g = build_generator::<f32>(&spec, 7).unwrap();
        let tape = Tape::new();
        let bound = g.bind(&tape);
        let x = tape.leaf(
            ArrayD::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |ix| {
                ((ix[2] * 31 + ix[3] * 17) % 255) as f32 / 127.5 - 1.0
            }),
            false,
        );
        let y = bound.forward(&tape, x).unwrap();
        assert_eq!(tape.shape(y), vec![1, 3, 64, 64]);
        let out = tape.value(y);
        assert!(out.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn generator_init_is_seed_deterministic() {
        let spec = GeneratorSpec {
            base_channels: 2,
            ..Default::default()
        };
        let a = build_generator::<f32>(&spec, 42).unwrap();
        let b = build_generator::<f32>(&spec, 42).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(
                pa.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                pb.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        let c = build_generator::<f32>(&spec, 43).unwrap();
        assert!(a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|(pa, pc)| pa.value != pc.value));
    }

    #[test]
    fn discriminator_patch_map_dims() {
        assert_eq!(discriminator_patch_dims(256, 256), (30, 30));
        assert_eq!(discriminator_patch_dims(64, 64), (6, 6));
        let spec = DiscriminatorSpec {
            base_channels: 2,
            ..Default::default()
        };
        let d = build_discriminator::<f32>(&spec, 1).unwrap();
        let tape = Tape::new();
        let bound = d.bind(&tape);
        let x = tape.leaf(zeros(&[1, 3, 64, 64]), false);
        let y = bound.forward(&tape, x).unwrap();
        assert_eq!(tape.shape(y), vec![1, 1, 6, 6]);
    }

    #[test]
    fn discriminator_rejects_tiny_inputs() {
        let d =
            build_discriminator::<f32>(&DiscriminatorSpec { base_channels: 2, ..Default::default() }, 1)
                .unwrap();
        let tape = Tape::new();
        let bound = d.bind(&tape);
        let x = tape.leaf(zeros(&[1, 3, 8, 8]), false);
        assert!(matches!(
            bound.forward(&tape, x),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn zero_weight_discriminator_outputs_final_bias() {
        let spec = DiscriminatorSpec {
            base_channels: 2,
            ..Default::default()
        };
        let mut d = build_discriminator::<f32>(&spec, 1).unwrap();
        for p in d.params.iter_mut() {
            if p.name.ends_with(".weight") {
                p.value.fill(0.0);
            }
        }
        let bias = 0.37f32;
        d.params
            .iter_mut()
            .find(|p| p.name == "layer4.bias")
            .unwrap()
            .value
            .fill(bias);
        let tape = Tape::new();
        let bound = d.bind(&tape);
        let x = tape.leaf(zeros(&[1, 3, 32, 32]), false);
        let y = bound.forward(&tape, x).unwrap();
        assert!(tape.value(y).iter().all(|&v| (v - bias).abs() < 1e-6));
    }

    #[test]
    fn segmenter_logit_shape_and_layer_counts() {
        let spec = SegmenterSpec {
            base_channels: 2,
            ..Default::default()
        };
        let s = build_segmenter::<f32>(&spec, 3).unwrap();
        let enc_convs = s
            .params
            .iter()
            .filter(|p| p.name.starts_with("enc") && p.name.contains(".conv") && p.name.ends_with(".weight"))
            .count();
        let dec_convs = s
            .params
            .iter()
            .filter(|p| p.name.starts_with("dec") && p.name.contains(".conv") && p.name.ends_with(".weight"))
            .count();
        assert_eq!(enc_convs, 13);
        assert_eq!(dec_convs, 13);

        let tape = Tape::new();
        let bound = s.bind(&tape);
        let x = tape.leaf(zeros(&[1, 3, 64, 64]), false);
        let y = bound.forward(&tape, x).unwrap();
        assert_eq!(tape.shape(y), vec![1, 2, 64, 64]);
    }

    #[test]
    fn segmenter_rejects_indivisible_dims() {
        let spec = SegmenterSpec {
            base_channels: 2,
            ..Default::default()
        };
        let s = build_segmenter::<f32>(&spec, 3).unwrap();
        let tape = Tape::new();
        let bound = s.bind(&tape);
        let x = tape.leaf(zeros(&[1, 3, 48, 48]), false);
        assert!(matches!(bound.forward(&tape, x), Err(CoreError::Shape(_))));
    }

    #[test]
    fn generator_forward_is_deterministic() {
        let spec = GeneratorSpec {
            base_channels: 2,
            ..Default::default()
        };
        let g = build_generator::<f32>(&spec, 9).unwrap();
        let run = || {
            let tape = Tape::new();
            let bound = g.bind(&tape);
            let x = tape.leaf(
                ArrayD::from_shape_fn(IxDyn(&[1, 3, 32, 32]), |ix| (ix[3] as f32 / 16.0) - 1.0),
                false,
            );
            let y = bound.forward(&tape, x).unwrap();
            tape.value(y)
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
