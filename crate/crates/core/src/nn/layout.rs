use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::ConvParams;

/// Builder that packs convolution weights into one flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    pub convs: Vec<ConvParams>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn conv(&mut self, cin: usize, cout: usize, k: usize) -> ConvParams {
        let w_off = self.len;
        let b_off = w_off + cout * cin * k * k;
        self.len = b_off + cout;
        let p = ConvParams { cin, cout, k, w_off, b_off };
        self.convs.push(p);
        p
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// He-normal kernels and zero biases. Convolutions listed in `zero` start at zero.
    pub fn init<R: Rng>(&self, rng: &mut R, gain: f64, zero: &[usize]) -> Vec<f64> {
        let mut params = vec![0.0; self.len];
        for (i, c) in self.convs.iter().enumerate() {
            if zero.contains(&i) {
                continue;
            }
            let fan_in = (c.cin * c.k * c.k) as f64;
            let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("finite std");
            for p in &mut params[c.w_off..c.w_off + c.weight_len()] {
                *p = normal.sample(rng);
            }
        }
        params
    }
}
