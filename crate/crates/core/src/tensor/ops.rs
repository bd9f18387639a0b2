use std::rc::Rc;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::{record, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn unary<F, G>(a: &Tensor, forward: F, derivative: G) -> Tensor
where
    F: Fn(f64) -> f64,
    G: Fn(f64, f64) -> f64 + 'static,
{
    let out: Vec<f64> = a.data.iter().map(|&x| forward(x)).collect();
    let x: Rc<[f64]> = a.data.clone();
    let y: Rc<[f64]> = out.clone().into();
    record(a.shape.clone(), out, &[a], move |g| {
        let ga = g
            .iter()
            .zip(x.iter().zip(y.iter()))
            .map(|(g, (&x, &y))| g * derivative(x, y))
            .collect();
        vec![Some(ga)]
    })
    .expect("single-input op cannot mix tapes")
}

impl Tensor {
    /// Matrix product of `[n,k]` and `[k,m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(shape_err("matmul", self, other));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let out = gemm(&self.data, &other.data, n, k, m);
        let (a, b) = (self.data.clone(), other.data.clone());
        let needs = (self.requires_grad(), other.requires_grad());
        record(vec![n, m], out, &[self, other], move |g| {
            let ga = needs.0.then(|| gemm_nt(g, &b, n, m, k));
            let gb = needs.1.then(|| gemm_tn(&a, g, n, k, m));
            vec![ga, gb]
        })
    }

    /// Element-wise sum. `other` may also be a scalar `[1]` or match the
    /// trailing dimensions of `self` (bias broadcast over leading rows).
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape == other.shape {
            let out = self.data.iter().zip(other.data.iter()).map(|(a, b)| a + b).collect();
            return record(self.shape.clone(), out, &[self, other], |g| {
                vec![Some(g.to_vec()), Some(g.to_vec())]
            });
        }
        let inner = other.len();
        let trailing_ok = other.shape.len() <= self.shape.len()
            && self.shape[self.shape.len() - other.shape.len()..] == other.shape[..];
        if !(trailing_ok || inner == 1) || inner == 0 {
            return Err(shape_err("add", self, other));
        }
        let b = other.data.clone();
        let out = self
            .data
            .iter()
            .enumerate()
            .map(|(i, a)| a + b[i % inner])
            .collect();
        let needs_b = other.requires_grad();
        record(self.shape.clone(), out, &[self, other], move |g| {
            let gb = needs_b.then(|| {
                let mut acc = vec![0.0; inner];
                for (i, gv) in g.iter().enumerate() {
                    acc[i % inner] += gv;
                }
                acc
            });
            vec![Some(g.to_vec()), gb]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err("sub", self, other));
        }
        let out = self.data.iter().zip(other.data.iter()).map(|(a, b)| a - b).collect();
        record(self.shape.clone(), out, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        })
    }

    /// Hadamard product of equally shaped tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err("mul_elementwise", self, other));
        }
        let out = self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.data.clone(), other.data.clone());
        let needs = (self.requires_grad(), other.requires_grad());
        record(self.shape.clone(), out, &[self, other], move |g| {
            let ga = needs.0.then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect());
            let gb = needs.1.then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect());
            vec![ga, gb]
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        unary(self, |x| x * factor, move |_, _| factor)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |x| x + c, |_, _| 1.0)
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last_dim(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.shape.len(), other.shape.len());
        if ra == 0 || ra != rb || self.shape[..ra - 1] != other.shape[..rb - 1] {
            return Err(shape_err("concat_last_dim", self, other));
        }
        let (da, db) = (self.shape[ra - 1], other.shape[rb - 1]);
        let rows = if da + db == 0 { 0 } else { (self.len() + other.len()) / (da + db) };
        let mut out = Vec::with_capacity(self.len() + other.len());
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * da..(r + 1) * da]);
            out.extend_from_slice(&other.data[r * db..(r + 1) * db]);
        }
        let mut shape = self.shape.clone();
        shape[ra - 1] = da + db;
        record(shape, out, &[self, other], move |g| {
            let mut ga = Vec::with_capacity(rows * da);
            let mut gb = Vec::with_capacity(rows * db);
            for row in g.chunks(da + db) {
                ga.extend_from_slice(&row[..da]);
                gb.extend_from_slice(&row[da..]);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(
            self,
            |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    /// Row-wise log-softmax over the last dimension, computed with
    /// max-subtraction.
    pub fn log_softmax_rows(&self) -> Tensor {
        let c = self.shape.last().copied().unwrap_or(1).max(1);
        let mut out = Vec::with_capacity(self.len());
        for row in self.data.chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let y: Rc<[f64]> = out.clone().into();
        record(self.shape.clone(), out, &[self], move |g| {
            let mut ga = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks(c).zip(y.chunks(c)) {
                let total: f64 = grow.iter().sum();
                ga.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * total));
            }
            vec![Some(ga)]
        })
        .expect("single-input op cannot mix tapes")
    }

    pub fn softmax_rows(&self) -> Tensor {
        self.log_softmax_rows().exp()
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data.iter().sum();
        let n = self.len();
        record(vec![1], vec![total], &[self], move |g| vec![Some(vec![g[0]; n])])
            .expect("single-input op cannot mix tapes")
    }

    /// Mean of all elements; zero for an empty tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.len();
        if n == 0 {
            return self.sum_all();
        }
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        record(shape, self.data.to_vec(), &[self], |g| vec![Some(g.to_vec())])
    }

    /// Selects rows (first-dimension slices) by index; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = self.shape.first().copied().unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let d = self.row_len();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(0);
        }
        shape[0] = indices.len();
        let idx: Vec<usize> = indices.to_vec();
        let src_len = self.len();
        record(shape, out, &[self], move |g| {
            let mut ga = vec![0.0; src_len];
            for (k, &i) in idx.iter().enumerate() {
                for (dst, src) in ga[i * d..(i + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                    *dst += src;
                }
            }
            vec![Some(ga)]
        })
    }

    /// Mean of rows sharing a segment id: `[n,d]` → `[segments,d]`.
    pub fn segment_mean(&self, segment_of_row: &[usize], segments: usize) -> Result<Tensor> {
        let rows = self.shape.first().copied().unwrap_or(0);
        if segment_of_row.len() != rows {
            return Err(Error::len_mismatch("segment_mean", rows, segment_of_row.len()));
        }
        if let Some(&bad) = segment_of_row.iter().find(|&&s| s >= segments) {
            return Err(Error::invalid(format!(
                "segment_mean: segment {bad} out of range for {segments}"
            )));
        }
        let d = self.row_len();
        let mut counts = vec![0usize; segments];
        let mut out = vec![0.0; segments * d];
        for (i, &s) in segment_of_row.iter().enumerate() {
            counts[s] += 1;
            for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(&self.data[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                out[s * d..(s + 1) * d].iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        let seg: Vec<usize> = segment_of_row.to_vec();
        let mut shape = self.shape.clone();
        shape[0] = segments;
        record(shape, out, &[self], move |g| {
            let mut ga = vec![0.0; rows * d];
            for (i, &s) in seg.iter().enumerate() {
                let inv = 1.0 / counts[s] as f64;
                for (dst, src) in ga[i * d..(i + 1) * d].iter_mut().zip(&g[s * d..(s + 1) * d]) {
                    *dst = src * inv;
                }
            }
            vec![Some(ga)]
        })
    }

    /// Picks one column per row of a `[n,c]` tensor.
    pub fn select_per_row(&self, cols: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 || self.shape[0] != cols.len() {
            return Err(Error::Shape {
                op: "select_per_row",
                lhs: self.shape.clone(),
                rhs: vec![cols.len()],
            });
        }
        let c = self.shape[1];
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::invalid(format!(
                "select_per_row: column {bad} out of range for {c}"
            )));
        }
        let out = cols.iter().enumerate().map(|(i, &j)| self.data[i * c + j]).collect();
        let cols: Vec<usize> = cols.to_vec();
        let n = self.shape[0];
        record(vec![n], out, &[self], move |g| {
            let mut ga = vec![0.0; n * c];
            for (i, &j) in cols.iter().enumerate() {
                ga[i * c + j] = g[i];
            }
            vec![Some(ga)]
        })
    }

    /// Unfolds 3×3 neighbourhoods of an `[h,w,c]` image into `[h·w, 9c]`
    /// rows, replicating edge pixels at the border.
    pub fn im2col3x3(&self) -> Result<Tensor> {
        let (h, w, c) = self.hwc("im2col3x3")?;
        let mut src_index = Vec::with_capacity(h * w * 9);
        for r in 0..h {
            for col in 0..w {
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                        let cc = (col as i64 + dc).clamp(0, w as i64 - 1) as usize;
                        src_index.push(rr * w + cc);
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(h * w * 9 * c);
        for &p in &src_index {
            out.extend_from_slice(&self.data[p * c..(p + 1) * c]);
        }
        let src_len = self.len();
        record(vec![h * w, 9 * c], out, &[self], move |g| {
            let mut ga = vec![0.0; src_len];
            for (k, &p) in src_index.iter().enumerate() {
                for (dst, src) in ga[p * c..(p + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                    *dst += src;
                }
            }
            vec![Some(ga)]
        })
    }

    /// 2×2 average pooling with stride 2 on an `[h,w,c]` image.
    pub fn avg_pool2x2(&self) -> Result<Tensor> {
        let (h, w, c) = self.hwc("avg_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "avg_pool2x2 needs even spatial size, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        for r in 0..oh {
            for col in 0..ow {
                let dst = (r * ow + col) * c;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((2 * r + dr) * w + 2 * col + dc) * c;
                    for ch in 0..c {
                        out[dst + ch] += 0.25 * self.data[src + ch];
                    }
                }
            }
        }
        record(vec![oh, ow, c], out, &[self], move |g| {
            let mut ga = vec![0.0; h * w * c];
            for r in 0..h {
                for col in 0..w {
                    let src = ((r / 2) * ow + col / 2) * c;
                    let dst = (r * w + col) * c;
                    for ch in 0..c {
                        ga[dst + ch] = 0.25 * g[src + ch];
                    }
                }
            }
            vec![Some(ga)]
        })
    }

    /// Nearest-neighbour upsampling of an `[h,w,c]` image by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (h, w, c) = self.hwc("upsample_nearest")?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(oh * ow * c);
        for r in 0..oh {
            for col in 0..ow {
                let src = ((r / factor) * w + col / factor) * c;
                out.extend_from_slice(&self.data[src..src + c]);
            }
        }
        record(vec![oh, ow, c], out, &[self], move |g| {
            let mut ga = vec![0.0; h * w * c];
            for r in 0..oh {
                for col in 0..ow {
                    let src = ((r / factor) * w + col / factor) * c;
                    let dst = (r * ow + col) * c;
                    for ch in 0..c {
                        ga[src + ch] += g[dst + ch];
                    }
                }
            }
            vec![Some(ga)]
        })
    }

    fn hwc(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] if h > 0 && w > 0 => Ok((h, w, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn log_softmax_uniform_row() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap().log_softmax_rows();
        for v in t.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = random(vec![20, 7], 3).scale(30.0).softmax_rows();
        for row in t.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(vec![7, 5], 1);
        let b = random(vec![5, 3], 2);
        let c = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let err = random(vec![2, 3], 0).matmul(&random(vec![2, 3], 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
        assert!(random(vec![2, 3], 0).mul(&random(vec![3, 2], 0)).is_err());
        assert!(random(vec![2, 3], 0).add(&random(vec![2], 0)).is_err());
        assert!(random(vec![2, 3], 0).concat_last_dim(&random(vec![3, 3], 0)).is_err());
    }

    #[test]
    fn bias_broadcast_adds_to_every_row() {
        let a = Tensor::zeros(vec![3, 2]);
        let b = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let x = random(vec![4, 6], 11);
        let w = random(vec![6, 3], 12);
        let other = random(vec![4, 6], 13);
        let bias = random(vec![6], 14);
        let image = random(vec![4, 6, 2], 15);
        let checks: Vec<(&str, Box<dyn Fn(&Tensor) -> Result<Tensor>>)> = vec![
            ("matmul_lhs", Box::new(|t| Ok(t.matmul(&w)?.sigmoid().sum_all()))),
            ("matmul_rhs", Box::new(|t| Ok(x.matmul(t)?.sigmoid().sum_all()))),
            ("add", Box::new(|t| Ok(t.add(&other)?.sigmoid().mean_all()))),
            ("add_bias", Box::new(|t| Ok(x.add(t)?.sigmoid().mean_all()))),
            ("sub", Box::new(|t| Ok(other.sub(t)?.sigmoid().mean_all()))),
            ("mul", Box::new(|t| Ok(t.mul(&other)?.mul(t)?.mean_all()))),
            ("concat", Box::new(|t| Ok(t.concat_last_dim(&other)?.sigmoid().sum_all()))),
            ("leaky_relu", Box::new(|t| Ok(t.leaky_relu(0.1).mul(&other)?.sum_all()))),
            ("sigmoid", Box::new(|t| Ok(t.sigmoid().mean_all()))),
            ("exp", Box::new(|t| Ok(t.exp().mean_all()))),
            ("log_softmax", Box::new(|t| Ok(t.log_softmax_rows().mul(&other)?.sum_all()))),
            ("mean", Box::new(|t| Ok(t.mul(t)?.mean_all()))),
            ("reshape", Box::new(|t| Ok(t.reshape(vec![24])?.sigmoid().sum_all()))),
            ("gather", Box::new(|t| Ok(t.gather_rows(&[3, 0, 3, 1])?.sigmoid().sum_all()))),
            ("segment_mean", Box::new(|t| Ok(t.segment_mean(&[1, 0, 1, 1], 2)?.sigmoid().sum_all()))),
            ("select", Box::new(|t| Ok(t.log_softmax_rows().select_per_row(&[0, 5, 2, 2])?.sum_all()))),
        ];
        for (name, f) in &checks {
            let input = if name.starts_with("matmul_rhs") {
                &w
            } else if name.starts_with("add_bias") {
                &bias
            } else {
                &x
            };
            let err = grad_check(f, input, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
        let image_checks: Vec<(&str, Box<dyn Fn(&Tensor) -> Result<Tensor>>)> = vec![
            ("im2col", Box::new(|t| Ok(t.im2col3x3()?.sigmoid().sum_all()))),
            ("avg_pool", Box::new(|t| Ok(t.avg_pool2x2()?.sigmoid().sum_all()))),
            ("upsample", Box::new(|t| Ok(t.upsample_nearest(2)?.sigmoid().sum_all()))),
        ];
        for (name, f) in &image_checks {
            let err = grad_check(f, &image, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn im2col_replicates_edges() {
        let img = Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let cols = img.im2col3x3().unwrap();
        assert_eq!(&cols.data()[..9], &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn select_gradient_is_one_hot() {
        let tape = Tape::new();
        let x = tape.leaf(&random(vec![2, 3], 5));
        x.select_per_row(&[2, 0]).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
