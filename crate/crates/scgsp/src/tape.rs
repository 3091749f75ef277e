//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records a computation graph of `Array2<f64>` values. Every
//! operation pushes a node holding its value and a backward closure that
//! scatters the incoming gradient to the node's parents. [`Tape::backward`]
//! walks the graph in reverse topological (= insertion) order and returns
//! per-node gradients, from which per-parameter gradients are extracted.
//!
//! Vectors are represented as 1xD matrices throughout.

use std::collections::HashMap;

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Array2<f64>, &Tape) -> Vec<(usize, Array2<f64>)>>;

struct Node {
    value: Array2<f64>,
    backward: Option<BackwardFn>,
    /// Parameter id when this leaf is bound to a trainable parameter.
    param: Option<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<usize, Var>,
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.by_node[v.0].as_ref()
    }
}

pub const LOG_CLAMP: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "expected scalar node");
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            backward,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; gradients stop here.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, None)
    }

    /// Leaf bound to trainable parameter `param_id`. Repeated requests for the
    /// same id return the same node so gradients accumulate in one place.
    pub fn param_leaf(&mut self, param_id: usize, value: Array2<f64>) -> Var {
        if let Some(&v) = self.param_leaves.get(&param_id) {
            return v;
        }
        self.nodes.push(Node {
            value,
            backward: None,
            param: Some(param_id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(param_id, v);
        v
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul {}x{} . {}x{}", ar, ac, br, bc);
        let out = self.value(a).dot(self.value(b));
        self.push(
            out,
            Some(Box::new(move |g, t| {
                vec![
                    (a.0, g.dot(&t.value(b).t())),
                    (b.0, t.value(a).t().dot(g)),
                ]
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) + self.value(b);
        self.push(
            out,
            Some(Box::new(move |g, _| {
                vec![(a.0, g.clone()), (b.0, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) - self.value(b);
        self.push(
            out,
            Some(Box::new(move |g, _| vec![(a.0, g.clone()), (b.0, -g)])),
        )
    }

    /// `a` is NxD, `row` is 1xD, broadcast-added to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, d) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, d));
        let out = self.value(a) + self.value(row);
        self.push(
            out,
            Some(Box::new(move |g, _| {
                let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(a.0, g.clone()), (row.0, col_sum)]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) * self.value(b);
        self.push(
            out,
            Some(Box::new(move |g, t| {
                vec![(a.0, g * t.value(b)), (b.0, g * t.value(a))]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Some(Box::new(move |g, _| vec![(a.0, g * c)])))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Some(Box::new(move |g, _| vec![(a.0, g.clone())])))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let v = self.push(
            out,
            Some(Box::new(move |_, _| unreachable!("patched below"))),
        );
        // backward uses the cached output value
        self.nodes[v.0].backward = Some(Box::new(move |g, t| {
            let y = t.value(v);
            vec![(a.0, g * &y.mapv(|s| s * (1.0 - s)))]
        }));
        v
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let v = self.push(out, None);
        self.nodes[v.0].backward = Some(Box::new(move |g, t| {
            let y = t.value(v);
            vec![(a.0, g * &y.mapv(|s| 1.0 - s * s))]
        }));
        v
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            out,
            Some(Box::new(move |g, t| {
                let mask = t.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a.0, g * &mask)]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let v = self.push(out, None);
        self.nodes[v.0].backward = Some(Box::new(move |g, t| {
            let y = t.value(v);
            vec![(a.0, g * y)]
        }));
        v
    }

    /// Natural log with the argument floored at `LOG_CLAMP`.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(LOG_CLAMP).ln());
        self.push(
            out,
            Some(Box::new(move |g, t| {
                let d = t.value(a).mapv(|x| 1.0 / x.max(LOG_CLAMP));
                vec![(a.0, g * &d)]
            })),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0).sqrt());
        self.push(
            out,
            Some(Box::new(move |g, t| {
                let d = t.value(a).mapv(|x| 0.5 / x.max(1e-12).sqrt());
                vec![(a.0, g * &d)]
            })),
        )
    }

    /// Clamp to [lo, hi]; gradient passes through only inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(
            out,
            Some(Box::new(move |g, t| {
                let mask = t
                    .value(a)
                    .mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                vec![(a.0, g * &mask)]
            })),
        )
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0).powf(p));
        self.push(
            out,
            Some(Box::new(move |g, t| {
                let d = t.value(a).mapv(|x| p * x.max(0.0).powf(p - 1.0));
                vec![(a.0, g * &d)]
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let v = self.push(out, None);
        self.nodes[v.0].backward = Some(Box::new(move |g, t| {
            let y = t.value(v);
            let mut da = g * y;
            for (mut drow, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                let dot = drow.sum();
                drow.zip_mut_with(&yrow.to_owned(), |d, &yy| *d -= dot * yy);
            }
            vec![(a.0, da)]
        }));
        v
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let v = self.push(out, None);
        self.nodes[v.0].backward = Some(Box::new(move |g, t| {
            let y = t.value(v);
            let mut da = g.clone();
            for (mut drow, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                let gsum = drow.sum();
                drow.zip_mut_with(&yrow.to_owned(), |d, &ly| *d -= gsum * ly.exp());
            }
            vec![(a.0, da)]
        }));
        v
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let dim = self.value(a).dim();
        self.push(
            Array2::from_elem((1, 1), s),
            Some(Box::new(move |g, _| {
                vec![(a.0, Array2::from_elem(dim, g[[0, 0]]))]
            })),
        )
    }

    /// Column-wise sum over rows: NxD -> 1xD.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let n = self.value(a).nrows();
        self.push(
            s,
            Some(Box::new(move |g, _| {
                let mut da = Array2::zeros((n, g.ncols()));
                for mut row in da.rows_mut() {
                    row.assign(&g.row(0));
                }
                vec![(a.0, da)]
            })),
        )
    }

    /// Column-wise mean over rows: NxD -> 1xD.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows();
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-major reshape to (rows, cols); element count must match.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let dim = self.value(a).dim();
        assert_eq!(dim.0 * dim.1, rows * cols, "reshape element count");
        let flat: Vec<f64> = self.value(a).iter().cloned().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).unwrap();
        self.push(
            out,
            Some(Box::new(move |g, _| {
                let flat: Vec<f64> = g.iter().cloned().collect();
                vec![(a.0, Array2::from_shape_vec(dim, flat).unwrap())]
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(
            out,
            Some(Box::new(move |g, _| vec![(a.0, g.t().to_owned())])),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, ca) = self.value(a).dim();
        let (nb, cb) = self.value(b).dim();
        assert_eq!(n, nb);
        let mut out = Array2::zeros((n, ca + cb));
        out.slice_mut(ndarray::s![.., ..ca]).assign(self.value(a));
        out.slice_mut(ndarray::s![.., ca..]).assign(self.value(b));
        self.push(
            out,
            Some(Box::new(move |g, _| {
                vec![
                    (a.0, g.slice(ndarray::s![.., ..ca]).to_owned()),
                    (b.0, g.slice(ndarray::s![.., ca..]).to_owned()),
                ]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut out = Array2::zeros((total, d));
        let mut offsets = Vec::with_capacity(parts.len());
        let mut at = 0usize;
        for &p in parts {
            let n = self.value(p).nrows();
            out.slice_mut(ndarray::s![at..at + n, ..])
                .assign(self.value(p));
            offsets.push((p.0, at, n));
            at += n;
        }
        self.push(
            out,
            Some(Box::new(move |g, _| {
                offsets
                    .iter()
                    .map(|&(idx, at, n)| (idx, g.slice(ndarray::s![at..at + n, ..]).to_owned()))
                    .collect()
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (n, c) = self.value(a).dim();
        assert!(start < end && end <= c);
        let out = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        self.push(
            out,
            Some(Box::new(move |g, _| {
                let mut da = Array2::zeros((n, c));
                da.slice_mut(ndarray::s![.., start..end]).assign(g);
                vec![(a.0, da)]
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (n, c) = self.value(a).dim();
        assert!(start < end && end <= n);
        let out = self.value(a).slice(ndarray::s![start..end, ..]).to_owned();
        self.push(
            out,
            Some(Box::new(move |g, _| {
                let mut da = Array2::zeros((n, c));
                da.slice_mut(ndarray::s![start..end, ..]).assign(g);
                vec![(a.0, da)]
            })),
        )
    }

    /// Row gather (embedding lookup). Backward scatter-adds.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let (n, c) = self.value(a).dim();
        let idx: Vec<usize> = indices.to_vec();
        let mut out = Array2::zeros((idx.len(), c));
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < n, "row index {} out of range {}", i, n);
            out.row_mut(k).assign(&self.value(a).row(i));
        }
        self.push(
            out,
            Some(Box::new(move |g, _| {
                let mut da = Array2::zeros((n, c));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = da.row_mut(i);
                    row += &g.row(k);
                }
                vec![(a.0, da)]
            })),
        )
    }

    /// Picks element `(r, cols[r])` from each row r, returning Nx1.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Var {
        let (n, c) = self.value(a).dim();
        assert_eq!(cols.len(), n);
        let cols: Vec<usize> = cols.to_vec();
        let mut out = Array2::zeros((n, 1));
        for (r, &j) in cols.iter().enumerate() {
            assert!(j < c);
            out[[r, 0]] = self.value(a)[[r, j]];
        }
        self.push(
            out,
            Some(Box::new(move |g, _| {
                let mut da = Array2::zeros((n, c));
                for (r, &j) in cols.iter().enumerate() {
                    da[[r, j]] = g[[r, 0]];
                }
                vec![(a.0, da)]
            })),
        )
    }

    /// Per-row layer normalization with learnable gain/bias (both 1xD).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let x = self.value(a).clone();
        let (n, d) = x.dim();
        assert_eq!(self.value(gain).dim(), (1, d));
        assert_eq!(self.value(bias).dim(), (1, d));
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = vec![0.0; n];
        for (r, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (c, &v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let xhat_saved = xhat;
        self.push(
            out,
            Some(Box::new(move |g, t| {
                let gval = t.value(gain);
                let dgain = (g * &xhat_saved).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dxhat = g * gval;
                let mut da = Array2::zeros((n, d));
                for r in 0..n {
                    let dx = dxhat.row(r);
                    let xh = xhat_saved.row(r);
                    let m1 = dx.sum() / d as f64;
                    let m2 = dx
                        .iter()
                        .zip(xh.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for c in 0..d {
                        da[[r, c]] = inv_std[r] * (dx[c] - m1 - xh[c] * m2);
                    }
                }
                vec![(a.0, da), (gain.0, dgain), (bias.0, dbias)]
            })),
        )
    }

    /// Reverse pass from scalar root. Returns gradients for every reached node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut by_node: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        by_node[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let g = match by_node[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &self.nodes[i].backward {
                for (pidx, pg) in back(&g, self) {
                    match &mut by_node[pidx] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            by_node[i] = Some(g);
        }
        Grads { by_node }
    }

    /// Gradient per parameter id for all parameter-bound leaves reached by `grads`.
    pub fn param_grads(&self, grads: &Grads) -> HashMap<usize, Array2<f64>> {
        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.by_node[i].as_ref()) {
                out.insert(pid, g.clone());
            }
        }
        out
    }
}
