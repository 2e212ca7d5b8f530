use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Init};
use crate::profile::{BASE_INPUT_CHANNELS, POSE_CHANNELS};

/// First convolution of the U-Net. The base kernel reads γ's first nine
/// channels; once extended, a second kernel over the pose channels is added
/// to its output. Keeping the pose kernel separate means a zero pose kernel
/// adds exact zeros.
#[derive(Debug, Clone)]
pub struct InputProjection {
    base: Conv2d,
    pose: Option<Conv2d>,
}

impl InputProjection {
    pub fn new(b: &Builder, out_channels: usize) -> Result<Self> {
        Ok(Self {
            base: Conv2d::new(b, BASE_INPUT_CHANNELS, out_channels, 3, 1)?,
            pose: None,
        })
    }

    pub fn is_extended(&self) -> bool {
        self.pose.is_some()
    }

    pub fn base(&self) -> &Conv2d {
        &self.base
    }

    /// (B, 27, h, w) -> (B, C, h, w).
    pub fn forward(&self, gamma: &Tensor) -> Result<Tensor> {
        let base = self.base.forward(&gamma.narrow(1, 0, BASE_INPUT_CHANNELS)?)?;
        match &self.pose {
            None => Ok(base),
            Some(pose) => {
                let p = gamma.narrow(1, BASE_INPUT_CHANNELS, POSE_CHANNELS)?;
                Ok((base + pose.forward_no_bias(&p)?)?)
            }
        }
    }

    /// The equivalent single kernel over all input channels.
    pub fn merged_kernel(&self) -> Result<Tensor> {
        match &self.pose {
            None => Ok(self.base.weight().clone()),
            Some(pose) => Ok(Tensor::cat(&[self.base.weight(), pose.weight()], 1)?),
        }
    }
}

/// Adds `extra` zero-initialized input channels (parameter `weight` under
/// `b`) to a 9-channel base projection. The base kernel and bias are kept.
pub fn extend_input_projection(base: &Conv2d, extra: usize, b: &Builder) -> Result<InputProjection> {
    let (cout, cin, k, _) = base.weight().dims4()?;
    if cin != BASE_INPUT_CHANNELS {
        return Err(Error::Dimension {
            context: "base input projection channels".into(),
            expected: BASE_INPUT_CHANNELS,
            found: cin,
        });
    }
    if extra != POSE_CHANNELS {
        return Err(Error::Dimension {
            context: "extra input channels".into(),
            expected: POSE_CHANNELS,
            found: extra,
        });
    }
    let weight = b.get("weight", &[cout, extra, k, k], Init::Zeros)?;
    let bias = base.bias().zeros_like()?;
    Ok(InputProjection {
        base: base.clone(),
        pose: Some(Conv2d::from_parts(weight, bias, 1)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, Var};

    #[test]
    fn zero_init_is_neutral_and_kernel_restricts_to_base() {
        let store = ParamStore::new(1, DType::F32, &Device::Cpu);
        let b = store.builder(true);
        let base = InputProjection::new(&b.pp("conv_in"), 8).unwrap();
        let ext = extend_input_projection(base.base(), 18, &b.pp("conv_in_pose")).unwrap();
        let gamma = Tensor::randn(0f32, 1.0, (2, 27, 6, 5), &Device::Cpu).unwrap();
        let zero_pose = Tensor::cat(
            &[gamma.narrow(1, 0, 9).unwrap(), Tensor::zeros((2, 18, 6, 5), DType::F32, &Device::Cpu).unwrap()],
            1,
        )
        .unwrap();
        let a: Vec<f32> = ext.forward(&gamma).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let z: Vec<f32> = ext.forward(&zero_pose).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let s: Vec<f32> = base.forward(&gamma).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, z);
        assert_eq!(a, s);
        let merged = ext.merged_kernel().unwrap();
        assert_eq!(merged.dims(), &[8, 27, 3, 3]);
        let head: Vec<f32> = merged.narrow(1, 0, 9).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let basew: Vec<f32> = base.base().weight().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(head, basew);
        let tail = merged.narrow(1, 9, 18).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(tail, 0.0);
    }

    #[test]
    fn one_step_breaks_neutrality() {
        let store = ParamStore::new(2, DType::F32, &Device::Cpu);
        let b = store.builder(true);
        let base = InputProjection::new(&b.pp("conv_in"), 4).unwrap();
        let ext = extend_input_projection(base.base(), 18, &b.pp("conv_in_pose")).unwrap();
        let gamma = Tensor::rand(0f32, 1.0, (1, 27, 4, 4), &Device::Cpu).unwrap();
        let before: Vec<f32> = ext.forward(&gamma).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let loss = ext.forward(&gamma).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let w: Var = store.var("conv_in_pose.weight").unwrap();
        let g = grads.get(w.as_tensor()).unwrap();
        w.set(&(w.as_tensor() - (g * 0.01).unwrap()).unwrap()).unwrap();
        let after: Vec<f32> = ext.forward(&gamma).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn wrong_base_width_is_fatal() {
        let store = ParamStore::new(3, DType::F32, &Device::Cpu);
        let b = store.builder(true);
        let conv = Conv2d::new(&b.pp("c"), 4, 8, 3, 1).unwrap();
        assert!(extend_input_projection(&conv, 18, &b.pp("p")).is_err());
    }
}
