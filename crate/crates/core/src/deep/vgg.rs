//! VGG16 convolutional trunk up to `relu5_3`.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::weights::{InputNorm, WeightStore};
use crate::error::{Error, Result};
use crate::ops;

/// Taps of the five stages, in order.
pub const LAYER_NAMES: [&str; 5] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3"];
pub const LAYER_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
const CONVS_PER_STAGE: [usize; 5] = [2, 2, 3, 3, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// 2x2 max pooling, as trained.
    Max,
    /// Hanning-windowed L2 pooling (stride 2), which is aliasing-free.
    L2,
}

/// Named activations from one forward pass.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub layers: Vec<(String, Tensor)>,
}

impl FeaturePyramid {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Conv {
    weight: Tensor,
    bias: Tensor,
}

pub struct Vgg16 {
    convs: Vec<Conv>,
    pub input_norm: InputNorm,
}

pub fn conv_name(stage: usize, idx: usize) -> String {
    format!("vgg16.conv{}_{}", stage + 1, idx + 1)
}

fn conv_shapes() -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut c_in = 3;
    for (s, (&n, &c_out)) in CONVS_PER_STAGE.iter().zip(LAYER_CHANNELS.iter()).enumerate() {
        for i in 0..n {
            out.push((conv_name(s, i), c_in, c_out));
            c_in = c_out;
        }
    }
    out
}

impl Vgg16 {
    /// Reads `vgg16.convS_I.weight` / `.bias` tensors from the store.
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let mut convs = Vec::new();
        for (name, c_in, c_out) in conv_shapes() {
            let weight = store.get(&format!("{name}.weight"))?.clone();
            let bias = store.get(&format!("{name}.bias"))?.clone();
            if weight.dims() != [c_out, c_in, 3, 3] || bias.dims() != [c_out] {
                return Err(Error::Weights(format!(
                    "{name}: unexpected shapes {:?} / {:?}",
                    weight.dims(),
                    bias.dims()
                )));
            }
            convs.push(Conv { weight, bias });
        }
        Ok(Self {
            convs,
            input_norm: store.input_norm.clone(),
        })
    }

    /// He-initialised trunk for tests and benchmarks that do not depend on
    /// the published weights.
    pub fn random(seed: u64) -> Result<Self> {
        Self::from_store(&Self::random_store(seed)?)
    }

    pub fn random_store(seed: u64) -> Result<WeightStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new(InputNorm::default());
        for (name, c_in, c_out) in conv_shapes() {
            let bound = (6.0 / (c_in * 9) as f64).sqrt();
            let w: Vec<f32> = (0..c_out * c_in * 9)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            let b: Vec<f32> = (0..c_out).map(|_| rng.random_range(-0.05..0.05)).collect();
            store.insert(
                format!("{name}.weight"),
                Tensor::from_vec(w, (c_out, c_in, 3, 3), &Device::Cpu)?,
            );
            store.insert(format!("{name}.bias"), Tensor::from_vec(b, c_out, &Device::Cpu)?);
        }
        Ok(store)
    }

    /// Applies the stored `(x - mean) / std` to `[0, 1]` input.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let m = ops::const_like(&self.input_norm.mean, &[1, 3, 1, 1], x)?;
        let s = ops::const_like(&self.input_norm.std, &[1, 3, 1, 1], x)?;
        Ok(x.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    /// Runs the trunk on already-normalised input and returns the five taps.
    pub fn forward(&self, x: &Tensor, pooling: Pooling) -> Result<FeaturePyramid> {
        let mut h = x.clone();
        let mut layers = Vec::with_capacity(5);
        let mut k = 0;
        for (stage, &n) in CONVS_PER_STAGE.iter().enumerate() {
            if stage > 0 {
                h = pool(&h, pooling)?;
            }
            for _ in 0..n {
                let c = &self.convs[k];
                let w = c.weight.to_dtype(h.dtype())?;
                let b = c.bias.to_dtype(h.dtype())?.reshape((1, (), 1, 1))?;
                h = crate::conv::same_conv(&h, &w)?.broadcast_add(&b)?.relu()?;
                k += 1;
            }
            layers.push((LAYER_NAMES[stage].to_string(), h.clone()));
        }
        Ok(FeaturePyramid { layers })
    }

    /// SHA-256 over every trunk tensor, for frozenness checks.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for c in &self.convs {
            for t in [&c.weight, &c.bias] {
                for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    h.update(v.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn dtype(&self) -> DType {
        self.convs[0].weight.dtype()
    }
}

fn pool(x: &Tensor, pooling: Pooling) -> Result<Tensor> {
    match pooling {
        Pooling::Max => ops::max_pool2x2(x),
        Pooling::L2 => {
            // hanning(5)[1:-1] outer product, normalised
            let a = [0.5, 1.0, 0.5];
            let mut k: Vec<f64> = a.iter().flat_map(|u| a.iter().map(move |v| u * v)).collect();
            let s: f64 = k.iter().sum();
            k.iter_mut().for_each(|v| *v /= s);
            let y = ops::depthwise(&x.sqr()?, &k, 3, 3, 1, 2)?;
            Ok(y.affine(1.0, 1e-12)?.sqrt()?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_image;

    #[test]
    fn pyramid_shapes_follow_architecture() {
        let vgg = Vgg16::random(1).unwrap();
        let x = rand_image(64, 48, 2).to_dtype(DType::F32).unwrap();
        let p = vgg.forward(&vgg.normalize(&x).unwrap(), Pooling::Max).unwrap();
        let dims: Vec<Vec<usize>> = p.layers.iter().map(|(_, t)| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![
                vec![1, 64, 64, 48],
                vec![1, 128, 32, 24],
                vec![1, 256, 16, 12],
                vec![1, 512, 8, 6],
                vec![1, 512, 4, 3]
            ]
        );
    }

    #[test]
    fn l2_pooling_rounds_up() {
        let vgg = Vgg16::random(1).unwrap();
        let x = rand_image(33, 35, 2).to_dtype(DType::F32).unwrap();
        let p = vgg.forward(&x, Pooling::L2).unwrap();
        assert_eq!(p.layers[1].1.dims(), &[1, 128, 17, 18]);
    }

    #[test]
    fn store_roundtrip_rebuilds_identical_trunk() {
        let store = Vgg16::random_store(5).unwrap();
        let a = Vgg16::from_store(&store).unwrap();
        let mut broken = WeightStore::new(InputNorm::default());
        for n in store.names().filter(|n| !n.contains("conv5_3")) {
            broken.insert(n, store.get(n).unwrap().clone());
        }
        assert!(Vgg16::from_store(&broken).is_err());
        assert_eq!(a.dtype(), DType::F32);
    }
}
