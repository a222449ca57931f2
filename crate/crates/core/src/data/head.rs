use crate::data::ClassId;
use crate::error::{Error, Result};

/// Affine map `out = W x + b` with `W` stored row-major as `rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain("layer dimensions must be positive"));
        }
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(Error::domain(format!(
                "layer {}x{} expects {} weights and {} biases, got {} and {}",
                rows,
                cols,
                rows * cols,
                rows,
                weights.len(),
                bias.len()
            )));
        }
        Ok(DenseLayer {
            rows,
            cols,
            weights,
            bias,
        })
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.cols).zip(&self.bias).map(|(row, &b)| {
            row.iter()
                .zip(input)
                .fold(b as f64, |acc, (&w, &x)| acc + w as f64 * x)
        }));
    }
}

/// The classifier tail that maps a latent vector to a class decision:
/// affine layers with ReLU in between and an argmax at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    layers: Vec<DenseLayer>,
}

impl ClassifierHead {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("classifier head needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[1].cols != pair[0].rows {
                return Err(Error::domain(format!(
                    "layer widths do not chain: {} outputs feed {} inputs",
                    pair[0].rows, pair[1].cols
                )));
            }
        }
        Ok(ClassifierHead { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn logits(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_width(v.len())?;
        Ok(self.forward(v))
    }

    /// Argmax of the final layer; ties go to the lowest class index.
    pub fn classify(&self, v: &[f64]) -> Result<ClassId> {
        self.check_width(v.len())?;
        Ok(argmax(&self.forward(v)))
    }

    pub fn classify_f32(&self, v: &[f32]) -> Result<ClassId> {
        let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        self.classify(&v)
    }

    /// Classification without the width check, for hot loops whose
    /// inputs were validated up front.
    pub(crate) fn classify_unchecked(&self, v: &[f64]) -> ClassId {
        argmax(&self.forward(v))
    }

    fn check_width(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::domain(format!(
                "head expects {} inputs, got {}",
                self.input_dim(),
                len
            )));
        }
        Ok(())
    }

    fn forward(&self, v: &[f64]) -> Vec<f64> {
        let mut cur = v.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i != last {
                next.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }
}

fn argmax(values: &[f64]) -> ClassId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity2() -> ClassifierHead {
        ClassifierHead::new(vec![
            DenseLayer::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn identity_head_is_argmax() {
        let head = identity2();
        assert_eq!(head.classify(&[3.0, 1.0]).unwrap(), 0);
        assert_eq!(head.classify(&[1.0, 3.0]).unwrap(), 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let head = identity2();
        assert_eq!(head.classify(&[2.0, 2.0]).unwrap(), 0);
        let three = ClassifierHead::new(vec![DenseLayer::new(
            3,
            1,
            vec![0.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0],
        )
        .unwrap()])
        .unwrap();
        assert_eq!(three.classify(&[5.0]).unwrap(), 1);
    }

    #[test]
    fn width_mismatch_is_domain_error() {
        let head = identity2();
        assert!(matches!(head.classify(&[1.0]), Err(Error::Domain(_))));
        assert!(matches!(
            ClassifierHead::new(vec![
                DenseLayer::new(3, 2, vec![0.0; 6], vec![0.0; 3]).unwrap(),
                DenseLayer::new(2, 4, vec![0.0; 8], vec![0.0; 2]).unwrap(),
            ]),
            Err(Error::Domain(_))
        ));
        assert!(DenseLayer::new(2, 2, vec![0.0; 3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn two_layer_forward_matches_long_hand_arithmetic() {
        // hidden = relu(W1 v + b1), out = W2 hidden + b2
        let w1 = vec![1.0, -2.0, 0.5, 0.0, 1.0, 1.0];
        let b1 = vec![0.5, -1.0];
        let w2 = vec![2.0, -1.0, -1.0, 3.0, 0.5, 0.5];
        let b2 = vec![0.0, 0.25, -0.5];
        let head = ClassifierHead::new(vec![
            DenseLayer::new(2, 3, w1, b1).unwrap(),
            DenseLayer::new(3, 2, w2, b2).unwrap(),
        ])
        .unwrap();
        let v = [2.0, 1.5, 4.0];
        // h0 = 2 - 3 + 2 + 0.5 = 1.5 ; h1 = 0 + 1.5 + 4 - 1 = 4.5
        // o0 = 3 - 4.5 = -1.5 ; o1 = -1.5 + 13.5 + 0.25 = 12.25 ; o2 = 0.75 + 2.25 - 0.5 = 2.5
        let logits = head.logits(&v).unwrap();
        assert_eq!(logits, vec![-1.5, 12.25, 2.5]);
        assert_eq!(head.classify(&v).unwrap(), 1);

        // negative hidden unit must be clipped before the next layer
        let v = [0.0, 3.0, 0.0];
        // h0 = -6 + 0.5 -> 0 ; h1 = 3 - 1 = 2
        let logits = head.logits(&v).unwrap();
        assert_eq!(logits, vec![-2.0, 6.25, 0.5]);
    }

    #[test]
    fn appending_a_never_winning_output_changes_nothing() {
        let head = ClassifierHead::new(vec![DenseLayer::new(
            3,
            2,
            vec![1.0, 0.2, -0.3, 1.0, 0.5, 0.5],
            vec![0.0, 0.1, -0.2],
        )
        .unwrap()])
        .unwrap();
        let mut w = head.layers()[0].weights.clone();
        w.extend([0.0, 0.0]);
        let mut b = head.layers()[0].bias.clone();
        b.push(-1e6);
        let extended =
            ClassifierHead::new(vec![DenseLayer::new(4, 2, w, b).unwrap()]).unwrap();
        for i in 0..20 {
            let v = [i as f64 * 0.37, (20 - i) as f64 * 0.21];
            assert_eq!(head.classify(&v).unwrap(), extended.classify(&v).unwrap());
        }
    }
}
