use super::{join, sigmoid, Conv3d, GlobalAvgPool3d, Layer, Mode, Slot, Swish};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Scalar, Tensor};

/// Squeeze-and-excitation gate: global pool, 1×1×1 reduce, swish, 1×1×1
/// expand, sigmoid, then channel-wise rescale of the input.
#[derive(Clone, Debug)]
pub struct SqueezeExcite<T> {
    pub reduce: Conv3d<T>,
    pub expand: Conv3d<T>,
    pool: GlobalAvgPool3d,
    act: Swish<T>,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> SqueezeExcite<T> {
    pub fn new(channels: usize, reduced: usize) -> Result<Self> {
        let g = ConvGeometry::new([1; 3], [1; 3], [0; 3])?;
        Ok(Self {
            reduce: Conv3d::new(channels, reduced, g, 1, true)?,
            expand: Conv3d::new(reduced, channels, g, 1, true)?,
            pool: GlobalAvgPool3d::new(),
            act: Swish::new(),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_channels()
    }

    fn gate(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        let (n, c, _) = x.dims5()?;
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "squeeze-excite expects {} channels, got {c}",
                self.channels()
            )));
        }
        let s = self.pool.forward(x, mode)?.reshape(vec![n, c, 1, 1, 1])?;
        let r = self.reduce.forward(&s, mode)?;
        let a = self.act.forward(&r, mode)?;
        let e = self.expand.forward(&a, mode)?;
        Ok(e.data().iter().map(|&v| sigmoid(v)).collect())
    }
}

fn rescale<T: Scalar>(x: &Tensor<T>, gate: &[T]) -> Tensor<T> {
    let vol = x.len() / gate.len();
    let mut y = x.clone();
    for (chunk, &g) in y.data_mut().chunks_mut(vol).zip(gate) {
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    y
}

impl<T: Scalar> Layer<T> for SqueezeExcite<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let gate = self.gate(x, mode)?;
        let y = rescale(x, &gate);
        self.cache = Some((x.clone(), gate));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, gate) = self
            .cache
            .take()
            .ok_or(Error::BackwardBeforeForward("squeeze_excite"))?;
        dy.expect_dims(x.dims(), "squeeze-excite backward")?;
        let (n, c, _) = x.dims5()?;
        let vol = x.len() / gate.len();
        // d(loss)/d(pre-sigmoid) for each (n, c)
        let de: Vec<T> = x
            .data()
            .chunks(vol)
            .zip(dy.data().chunks(vol))
            .zip(&gate)
            .map(|((xc, dc), &g)| {
                let dg: T = xc.iter().zip(dc).map(|(&a, &b)| a * b).sum();
                dg * g * (T::one() - g)
            })
            .collect();
        let de = Tensor::new(vec![n, c, 1, 1, 1], de)?;
        let da = self.expand.backward(&de)?;
        let dr = self.act.backward(&da)?;
        let ds = self.reduce.backward(&dr)?.reshape(vec![n, c])?;
        let mut dx = self.pool.backward(&ds)?;
        for ((d, &g), &up) in dx.data_mut().iter_mut().zip(
            gate.iter().flat_map(|g| std::iter::repeat_n(g, vol)),
        ).zip(dy.data()) {
            *d += up * g;
        }
        self.cache = Some((x, gate));
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, bool)) {
        self.reduce.visit_ref(&join(prefix, "reduce"), f);
        self.expand.visit_ref(&join(prefix, "expand"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_se(rng: &mut ChaCha8Rng) -> SqueezeExcite<f64> {
        let mut se = SqueezeExcite::new(6, 2).unwrap();
        se.reduce.init_fan_out(rng);
        se.expand.init_fan_out(rng);
        se
    }

    #[test]
    fn zero_expand_gives_half_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut se = random_se(&mut rng);
        se.expand.weight.value.data_mut().fill(0.0);
        let x = Tensor::from_fn(vec![2, 6, 2, 2, 2], |_| rng.random_range(-2.0..2.0)).unwrap();
        let y = se.forward(&x, Mode::Train).unwrap();
        assert_eq!(y, x.scale(0.5));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut se = random_se(&mut rng);
        let x = Tensor::zeros(vec![1, 6, 2, 3, 3]).unwrap();
        assert!(se.forward(&x, Mode::Eval).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_never_exceeds_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut se = random_se(&mut rng);
        let x = Tensor::from_fn(vec![2, 6, 2, 3, 3], |_| rng.random_range(-5.0..5.0)).unwrap();
        let y = se.forward(&x, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut se = SqueezeExcite::<f32>::new(4, 1).unwrap();
        let x = Tensor::zeros(vec![1, 3, 1, 2, 2]).unwrap();
        assert!(se.forward(&x, Mode::Eval).is_err());
    }
}
