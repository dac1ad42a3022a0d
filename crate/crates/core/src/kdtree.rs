//! Static KD-tree for exact fixed-radius queries over row-major points.

const LEAF_SIZE: usize = 16;

/// Squared Euclidean distance, accumulated in dimension order.
#[inline]
pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    end: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    children: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    data: &'a [f64],
    dim: usize,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    /// Builds over `data.len() / dim` points. Splits at the median of the
    /// widest dimension.
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "ragged point buffer");
        let n = data.len() / dim;
        let mut tree = Self {
            data,
            dim,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn point(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for &i in &self.order[start..end] {
            for (d, &v) in self.point(i).iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        let id = self.nodes.len();
        let split_dim = (0..self.dim)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let spread = hi[split_dim] - lo[split_dim];
        self.nodes.push(Node {
            start,
            end,
            lo,
            hi,
            children: None,
        });
        if end - start <= LEAF_SIZE || spread <= 0.0 {
            return id;
        }
        let mid = start + (end - start) / 2;
        let (data, dim) = (self.data, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            data[a * dim + split_dim].total_cmp(&data[b * dim + split_dim])
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id].children = Some((left, right));
        id
    }

    /// Appends every index `i` with `dist2(query, point_i) <= r2` to `out`,
    /// in unspecified order.
    pub fn within(&self, query: &[f64], r2: f64, out: &mut Vec<usize>) {
        self.visit_within(query, r2, |ids| out.extend_from_slice(ids));
    }

    /// Same set as [`KdTree::within`], written into a bitmap of `len()` bits.
    pub fn within_bits(&self, query: &[f64], r2: f64, bits: &mut [u64]) {
        self.visit_within(query, r2, |ids| {
            for &i in ids {
                bits[i / 64] |= 1 << (i % 64);
            }
        });
    }

    /// Calls `emit` with all members of nodes entirely inside the ball, and
    /// with single points that pass the exact check elsewhere.
    fn visit_within(&self, query: &[f64], r2: f64, mut emit: impl FnMut(&[usize])) {
        if self.nodes.is_empty() {
            return;
        }
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            // Per-dimension gaps to the box bound the gaps to every member
            // point from below (near) and above (far), and rounding is
            // monotone, so both tests agree with the exact per-point check.
            let mut near = 0.0;
            let mut far = 0.0;
            for d in 0..self.dim {
                let q = query[d];
                let (lo, hi) = (node.lo[d], node.hi[d]);
                let g = if q < lo {
                    q - lo
                } else if q > hi {
                    q - hi
                } else {
                    0.0
                };
                near += g * g;
                let f = (q - lo).abs().max((q - hi).abs());
                far += f * f;
            }
            if near > r2 {
                continue;
            }
            if far <= r2 {
                emit(&self.order[node.start..node.end]);
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => {
                    for i in &self.order[node.start..node.end] {
                        if dist2(query, self.point(*i)) <= r2 {
                            emit(std::slice::from_ref(i));
                        }
                    }
                }
            }
        }
    }
}
