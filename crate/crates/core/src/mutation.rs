//! Image mutation operators.
//!
//! Four affine operators (translate, rotate, scale, shear) use nearest-neighbour
//! resampling with zero padding; four pixel-value operators (brightness,
//! contrast, blur, noise) act per pixel. Images are `H x W x C` tensors in
//! `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum fraction of changed pixels for a pixel-value mutant.
pub const MAX_CHANGED_FRACTION: f32 = 0.5;
/// Maximum per-pixel change for a pixel-value mutant.
pub const MAX_PIXEL_CHANGE: f32 = 0.2;

/// Legal range of one operator parameter. The identity value is always legal
/// even when it lies outside `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub min: f32,
    pub max: f32,
    pub identity: f32,
    pub integer: bool,
}

impl ParamSpec {
    const fn real(name: &'static str, min: f32, max: f32, identity: f32) -> Self {
        ParamSpec {
            name,
            min,
            max,
            identity,
            integer: false,
        }
    }

    const fn int(name: &'static str, min: f32, max: f32, identity: f32) -> Self {
        ParamSpec {
            name,
            min,
            max,
            identity,
            integer: true,
        }
    }

    pub fn is_legal(&self, value: f32) -> bool {
        if value == self.identity {
            return true;
        }
        (self.min..=self.max).contains(&value) && (!self.integer || value.fract() == 0.0)
    }

    fn sample(&self, rng: &mut impl Rng) -> f32 {
        if self.integer {
            rng.random_range(self.min as i32..=self.max as i32) as f32
        } else if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

pub trait MutationOperator: Send + Sync {
    fn name(&self) -> &'static str;

    fn is_affine(&self) -> bool;

    fn params(&self) -> &'static [ParamSpec];

    /// Applies the transform without range validation.
    fn apply(&self, image: &Tensor, params: &[f32], rng_seed: u64) -> Tensor;
}

/// One recorded mutation: operator name, its parameters, and the seed for
/// stochastic operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    pub operator: String,
    pub params: Vec<f32>,
    pub rng_seed: u64,
}

impl MutationSpec {
    pub fn new(operator: impl Into<String>, params: Vec<f32>) -> Self {
        MutationSpec {
            operator: operator.into(),
            params,
            rng_seed: 0,
        }
    }
}

/// Ordered mutations applied to a seed image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MutationChain(pub Vec<MutationSpec>);

impl MutationChain {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn push(&mut self, spec: MutationSpec) {
        self.0.push(spec);
    }

    pub fn with(&self, spec: MutationSpec) -> MutationChain {
        let mut c = self.clone();
        c.push(spec);
        c
    }

    pub fn has_affine(&self, registry: &MutationRegistry) -> bool {
        self.0.iter().any(|s| registry.is_affine(&s.operator))
    }

    /// Re-applies every mutation to `seed`.
    pub fn replay(&self, registry: &MutationRegistry, seed: &Tensor) -> Result<Tensor> {
        if self.0.iter().filter(|s| registry.is_affine(&s.operator)).count() > 1 {
            return Err(Error::InvalidConfig("a chain may contain at most one affine mutation".into()));
        }
        let mut image = seed.clone();
        for spec in &self.0 {
            image = registry.mutate(&image, spec)?;
        }
        Ok(image)
    }

    /// The image pixel-value mutants are compared against: the seed with the
    /// chain's affine mutation applied, if any.
    pub fn reference(&self, registry: &MutationRegistry, seed: &Tensor) -> Result<Tensor> {
        match self.0.iter().find(|s| registry.is_affine(&s.operator)) {
            Some(spec) => registry.mutate(seed, spec),
            None => Ok(seed.clone()),
        }
    }
}

/// Serializable description of one registered operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorInfo {
    pub name: String,
    pub affine: bool,
    pub params: Vec<ParamInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub min: f32,
    pub max: f32,
    pub identity: f32,
    pub integer: bool,
}

/// Name-keyed operator table.
pub struct MutationRegistry {
    operators: Vec<Box<dyn MutationOperator>>,
}

impl MutationRegistry {
    pub fn empty() -> Self {
        MutationRegistry { operators: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Translate));
        r.register(Box::new(Rotate));
        r.register(Box::new(Scale));
        r.register(Box::new(Shear));
        r.register(Box::new(Brightness));
        r.register(Box::new(Contrast));
        r.register(Box::new(Blur));
        r.register(Box::new(Noise));
        r
    }

    pub fn register(&mut self, op: Box<dyn MutationOperator>) {
        match self.operators.iter_mut().find(|o| o.name() == op.name()) {
            Some(slot) => *slot = op,
            None => self.operators.push(op),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.operators.iter().map(|o| o.name()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn MutationOperator> {
        self.operators
            .iter()
            .find(|o| o.name() == name)
            .map(|o| o.as_ref())
            .ok_or_else(|| Error::UnknownName {
                family: "mutation operator",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn describe(&self) -> Vec<OperatorInfo> {
        self.operators
            .iter()
            .map(|o| OperatorInfo {
                name: o.name().into(),
                affine: o.is_affine(),
                params: o
                    .params()
                    .iter()
                    .map(|p| ParamInfo {
                        name: p.name.into(),
                        min: p.min,
                        max: p.max,
                        identity: p.identity,
                        integer: p.integer,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn is_affine(&self, name: &str) -> bool {
        self.get(name).is_ok_and(|o| o.is_affine())
    }

    pub fn validate(&self, spec: &MutationSpec) -> Result<&dyn MutationOperator> {
        let op = self.get(&spec.operator)?;
        let params = op.params();
        if spec.params.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "`{}` takes {} parameters, got {}",
                op.name(),
                params.len(),
                spec.params.len()
            )));
        }
        for (p, &v) in params.iter().zip(&spec.params) {
            if !p.is_legal(v) {
                return Err(Error::InvalidParameter {
                    operator: op.name().to_string(),
                    name: p.name.to_string(),
                    value: v,
                });
            }
        }
        Ok(op)
    }

    /// Validated, clamped application of one mutation.
    pub fn mutate(&self, image: &Tensor, spec: &MutationSpec) -> Result<Tensor> {
        let op = self.validate(spec)?;
        let mut out = op.apply(image, &spec.params, spec.rng_seed);
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(out)
    }

    /// Uniform operator choice, then uniform parameters in the legal range.
    pub fn sample_spec(&self, rng: &mut impl Rng, allow_affine: bool) -> MutationSpec {
        let eligible: Vec<&dyn MutationOperator> = self
            .operators
            .iter()
            .map(|o| o.as_ref())
            .filter(|o| allow_affine || !o.is_affine())
            .collect();
        assert!(!eligible.is_empty(), "no eligible mutation operators");
        let op = eligible[rng.random_range(0..eligible.len())];
        let params = op.params().iter().map(|p| p.sample(rng)).collect();
        MutationSpec {
            operator: op.name().to_string(),
            params,
            rng_seed: rng.random(),
        }
    }
}

pub fn sample_spec(rng: &mut impl Rng, allow_affine: bool) -> MutationSpec {
    MutationRegistry::builtin().sample_spec(rng, allow_affine)
}

pub fn mutate(image: &Tensor, spec: &MutationSpec) -> Result<Tensor> {
    MutationRegistry::builtin().mutate(image, spec)
}

/// A pixel-value mutant is valid if it changes at most half of the pixels or
/// changes no pixel by more than 0.2.
pub fn check_validity(original: &Tensor, mutated: &Tensor) -> bool {
    debug_assert_eq!(original.shape(), mutated.shape());
    let mut changed = 0usize;
    let mut max_change = 0.0f32;
    for (&a, &b) in original.data().iter().zip(mutated.data()) {
        if a != b {
            changed += 1;
            max_change = max_change.max((a - b).abs());
        }
    }
    let l0 = changed as f32 / original.len().max(1) as f32;
    l0 <= MAX_CHANGED_FRACTION || max_change <= MAX_PIXEL_CHANGE
}

fn dims(image: &Tensor) -> (usize, usize, usize) {
    match *image.shape() {
        [h, w, c] => (h, w, c),
        [h, w] => (h, w, 1),
        [n] => (1, n, 1),
        _ => panic!("mutation operators need an HxWxC image, got {:?}", image.shape()),
    }
}

/// Inverse-maps every output pixel to a source coordinate and copies the
/// nearest source pixel; outside the image reads as zero.
fn remap(image: &Tensor, source: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (h, w, c) = dims(image);
    let src = image.data();
    let mut out = Tensor::zeros(image.shape().to_vec());
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source(x as f64, y as f64);
            let (sx, sy) = (sx.round(), sy.round());
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            dst[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    out
}

fn center(image: &Tensor) -> (f64, f64) {
    let (h, w, _) = dims(image);
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

pub struct Translate;
pub struct Rotate;
pub struct Scale;
pub struct Shear;
pub struct Brightness;
pub struct Contrast;
pub struct Blur;
pub struct Noise;

impl MutationOperator for Translate {
    fn name(&self) -> &'static str {
        "translate"
    }

    fn is_affine(&self) -> bool {
        true
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: [ParamSpec; 2] = [ParamSpec::int("dx", -3.0, 3.0, 0.0), ParamSpec::int("dy", -3.0, 3.0, 0.0)];
        &P
    }

    fn apply(&self, image: &Tensor, params: &[f32], _: u64) -> Tensor {
        let (dx, dy) = (f64::from(params[0]), f64::from(params[1]));
        remap(image, |x, y| (x - dx, y - dy))
    }
}

impl MutationOperator for Rotate {
    fn name(&self) -> &'static str {
        "rotate"
    }

    fn is_affine(&self) -> bool {
        true
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: [ParamSpec; 1] = [ParamSpec::real("degrees", -15.0, 15.0, 0.0)];
        &P
    }

    /// Positive angles rotate the content counter-clockwise as displayed
    /// (rows top to bottom).
    fn apply(&self, image: &Tensor, params: &[f32], _: u64) -> Tensor {
        let (sin, cos) = f64::from(params[0]).to_radians().sin_cos();
        let (cx, cy) = center(image);
        remap(image, |x, y| {
            let (rx, ry) = (x - cx, y - cy);
            (cx + rx * cos - ry * sin, cy + rx * sin + ry * cos)
        })
    }
}

impl MutationOperator for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn is_affine(&self) -> bool {
        true
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: [ParamSpec; 1] = [ParamSpec::real("factor", 0.8, 1.2, 1.0)];
        &P
    }

    fn apply(&self, image: &Tensor, params: &[f32], _: u64) -> Tensor {
        let s = f64::from(params[0]);
        let (cx, cy) = center(image);
        remap(image, |x, y| (cx + (x - cx) / s, cy + (y - cy) / s))
    }
}

impl MutationOperator for Shear {
    fn name(&self) -> &'static str {
        "shear"
    }

    fn is_affine(&self) -> bool {
        true
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: [ParamSpec; 1] = [ParamSpec::real("factor", -0.15, 0.15, 0.0)];
        &P
    }

    fn apply(&self, image: &Tensor, params: &[f32], _: u64) -> Tensor {
        let k = f64::from(params[0]);
        let (_, cy) = center(image);
        remap(image, |x, y| (x - k * (y - cy), y))
    }
}

impl MutationOperator for Brightness {
    fn name(&self) -> &'static str {
        "brightness"
    }

    fn is_affine(&self) -> bool {
        false
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: [ParamSpec; 1] = [ParamSpec::real("delta", -0.3, 0.3, 0.0)];
        &P
    }

    fn apply(&self, image: &Tensor, params: &[f32], _: u64) -> Tensor {
        let beta = params[0];
        image.map(|v| (v + beta).clamp(0.0, 1.0))
    }
}

impl MutationOperator for Contrast {
    fn name(&self) -> &'static str {
        "contrast"
    }

    fn is_affine(&self) -> bool {
        false
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: [ParamSpec; 1] = [ParamSpec::real("factor", 0.7, 1.3, 1.0)];
        &P
    }

    /// Scales about mid-grey: `v * a + 0.5 * (1 - a)`.
    fn apply(&self, image: &Tensor, params: &[f32], _: u64) -> Tensor {
        let a = params[0];
        let offset = 0.5 * (1.0 - a);
        image.map(|v| (v * a + offset).clamp(0.0, 1.0))
    }
}

impl MutationOperator for Blur {
    fn name(&self) -> &'static str {
        "blur"
    }

    fn is_affine(&self) -> bool {
        false
    }

    /// Kernel size 1 is the identity; sampling always draws 3.
    fn params(&self) -> &'static [ParamSpec] {
        const P: [ParamSpec; 2] = [ParamSpec::int("kernel", 3.0, 3.0, 1.0), ParamSpec::real("sigma", 0.5, 1.0, 0.5)];
        &P
    }

    fn apply(&self, image: &Tensor, params: &[f32], _: u64) -> Tensor {
        if params[0] <= 1.0 {
            return image.clone();
        }
        let sigma = f64::from(params[1]);
        let mut kernel = [[0.0f64; 3]; 3];
        for (dy, row) in kernel.iter_mut().enumerate() {
            for (dx, k) in row.iter_mut().enumerate() {
                let (ox, oy) = (dx as f64 - 1.0, dy as f64 - 1.0);
                *k = (-(ox * ox + oy * oy) / (2.0 * sigma * sigma)).exp();
            }
        }
        let (h, w, c) = dims(image);
        let src = image.data();
        let mut out = Tensor::zeros(image.shape().to_vec());
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let (mut acc, mut norm) = (0.0f64, 0.0f64);
                    for (dy, row) in kernel.iter().enumerate() {
                        for (dx, &k) in row.iter().enumerate() {
                            let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += k * f64::from(src[(sy as usize * w + sx as usize) * c + ch]);
                            norm += k;
                        }
                    }
                    dst[(y * w + x) * c + ch] = (acc / norm) as f32;
                }
            }
        }
        out
    }
}

impl MutationOperator for Noise {
    fn name(&self) -> &'static str {
        "noise"
    }

    fn is_affine(&self) -> bool {
        false
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: [ParamSpec; 1] = [ParamSpec::real("sigma", 0.01, 0.08, 0.0)];
        &P
    }

    fn apply(&self, image: &Tensor, params: &[f32], rng_seed: u64) -> Tensor {
        let sigma = params[0];
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut out = image.clone();
        for v in out.data_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *v = (*v + sigma * z).clamp(0.0, 1.0);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![h, w, 1], data).unwrap()
    }

    #[test]
    fn translate_zero_is_identity() {
        let image = img(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let out = mutate(&image, &MutationSpec::new("translate", vec![0.0, 0.0])).unwrap();
        assert_eq!(out, image);
    }

    #[test]
    fn translate_shifts_with_zero_padding() {
        let image = img(1, 3, vec![0.1, 0.2, 0.3]);
        let out = mutate(&image, &MutationSpec::new("translate", vec![1.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.1, 0.2]);
    }

    #[test]
    fn brightness_clamps() {
        let image = Tensor::filled(vec![2, 2, 1], 0.9);
        let out = mutate(&image, &MutationSpec::new("brightness", vec![0.3])).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rotate_quarter_turn_on_2x2() {
        // [[a, b], [c, d]] turned counter-clockwise is [[b, d], [a, c]].
        let image = img(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let out = Rotate.apply(&image, &[90.0], 0);
        assert_eq!(out.data(), &[0.2, 0.4, 0.1, 0.3]);
    }

    #[test]
    fn out_of_range_parameters_rejected() {
        let image = Tensor::filled(vec![2, 2, 1], 0.5);
        let err = mutate(&image, &MutationSpec::new("rotate", vec![90.0])).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { .. }));
        assert!(mutate(&image, &MutationSpec::new("translate", vec![0.5, 0.0])).is_err());
        assert!(mutate(&image, &MutationSpec::new("blur", vec![2.0, 0.7])).is_err());
        assert!(mutate(&image, &MutationSpec::new("blur", vec![3.0])).is_err());
        assert!(mutate(&image, &MutationSpec::new("warp", vec![])).is_err());
    }

    #[test]
    fn pixel_only_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reg = MutationRegistry::builtin();
        for _ in 0..200 {
            let spec = reg.sample_spec(&mut rng, false);
            assert!(!reg.is_affine(&spec.operator), "{}", spec.operator);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let reg = MutationRegistry::builtin();
        let a = reg.sample_spec(&mut ChaCha8Rng::seed_from_u64(11), true);
        let b = reg.sample_spec(&mut ChaCha8Rng::seed_from_u64(11), true);
        assert_eq!(a, b);
    }

    #[test]
    fn validity_clauses() {
        let a = Tensor::filled(vec![4, 4, 1], 0.2);
        assert!(check_validity(&a, &a));
        assert!(!check_validity(&a, &Tensor::filled(vec![4, 4, 1], 0.7)));
        // every pixel moves by 0.1: L-inf clause passes
        assert!(check_validity(&a, &Tensor::filled(vec![4, 4, 1], 0.3)));
        // a quarter of the pixels move by 0.8: L0 clause passes
        let mut b = a.clone();
        b.data_mut()[..4].iter_mut().for_each(|v| *v = 1.0);
        assert!(check_validity(&a, &b));
    }

    #[test]
    fn contrast_about_mid_grey() {
        let image = img(1, 3, vec![0.0, 0.5, 1.0]);
        let out = mutate(&image, &MutationSpec::new("contrast", vec![0.8])).unwrap();
        let expect = [0.1, 0.5, 0.9];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_keeps_constant_images() {
        let image = Tensor::filled(vec![5, 5, 1], 0.4);
        let out = mutate(&image, &MutationSpec::new("blur", vec![3.0, 0.8])).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn chain_rejects_two_affine_ops() {
        let reg = MutationRegistry::builtin();
        let chain = MutationChain(vec![
            MutationSpec::new("rotate", vec![5.0]),
            MutationSpec::new("shear", vec![0.1]),
        ]);
        assert!(chain.replay(&reg, &Tensor::filled(vec![3, 3, 1], 0.5)).is_err());
    }
}
