//! Uniform structured grids on intervals and rectangles.
//!
//! Velocities live on grid nodes (boundary nodes included, where the Dirichlet condition
//! holds). Densities live on cell centres. The pairing of node-to-cell divergence with
//! cell-to-node gradient is what keeps the acoustic coupling free of odd-even modes in 1D.
//!
//! All difference operators are stored as sparse matrices built once per grid. 2D
//! operators are Kronecker products of 1D building blocks with the x index running fastest.
//! Vector fields are stored node-major: component `c` of node `i` sits at `i * dim + c`.

use std::fmt::Write as _;

use nalgebra::Matrix2;
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

/// Where the values of a field are located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Location {
    Nodes,
    Cells,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    dim: usize,
    nodes: [usize; 2],
    lower: [f64; 2],
    upper: [f64; 2],
    spacing: [f64; 2],
}

impl Grid {
    /// Interval `[a, b]` with `n` nodes.
    pub fn interval(a: f64, b: f64, n: usize) -> Result<Self> {
        Self::new(1, [n, 1], [a, 0.0], [b, 0.0])
    }

    /// Unit interval with `cells` cells, so `h = 1 / cells`.
    pub fn unit_interval(cells: usize) -> Result<Self> {
        Self::interval(0.0, 1.0, cells + 1)
    }

    /// Rectangle `[a0, b0] x [a1, b1]` with `nx * ny` nodes.
    pub fn rectangle(lower: [f64; 2], upper: [f64; 2], nx: usize, ny: usize) -> Result<Self> {
        Self::new(2, [nx, ny], lower, upper)
    }

    fn new(dim: usize, nodes: [usize; 2], lower: [f64; 2], upper: [f64; 2]) -> Result<Self> {
        let mut spacing = [1.0, 1.0];
        for ax in 0..dim {
            if nodes[ax] < 3 {
                return Err(Error::Shape(format!("need at least 3 nodes per axis, got {}", nodes[ax])));
            }
            if !(upper[ax] > lower[ax]) || !lower[ax].is_finite() || !upper[ax].is_finite() {
                return Err(Error::Shape(format!("degenerate extent [{}, {}]", lower[ax], upper[ax])));
            }
            spacing[ax] = (upper[ax] - lower[ax]) / (nodes[ax] - 1) as f64;
        }
        Ok(Self { dim, nodes, lower, upper, spacing })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Node counts per axis (the unused axis of a 1D grid reports 1).
    pub fn node_counts(&self) -> [usize; 2] {
        self.nodes
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        (self.lower, self.upper)
    }

    fn cell_counts(&self) -> [usize; 2] {
        if self.dim == 1 {
            [self.nodes[0] - 1, 1]
        } else {
            [self.nodes[0] - 1, self.nodes[1] - 1]
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }

    pub fn n_cells(&self) -> usize {
        let c = self.cell_counts();
        c[0] * c[1]
    }

    pub fn len(&self, loc: Location) -> usize {
        match loc {
            Location::Nodes => self.n_nodes(),
            Location::Cells => self.n_cells(),
        }
    }

    /// Volume of one cell, `h_x` in 1D and `h_x h_y` in 2D.
    pub fn cell_volume(&self) -> f64 {
        self.spacing[..self.dim].iter().product()
    }

    pub fn node_ij(&self, idx: usize) -> (usize, usize) {
        (idx % self.nodes[0], idx / self.nodes[0])
    }

    pub fn node_coord(&self, idx: usize) -> [f64; 2] {
        let (i, j) = self.node_ij(idx);
        let y = if self.dim == 2 { self.lower[1] + j as f64 * self.spacing[1] } else { 0.0 };
        [self.lower[0] + i as f64 * self.spacing[0], y]
    }

    pub fn cell_coord(&self, idx: usize) -> [f64; 2] {
        let c = self.cell_counts();
        let (i, j) = (idx % c[0], idx / c[0]);
        let y = if self.dim == 2 { self.lower[1] + (j as f64 + 0.5) * self.spacing[1] } else { 0.0 };
        [self.lower[0] + (i as f64 + 0.5) * self.spacing[0], y]
    }

    pub fn coord(&self, loc: Location, idx: usize) -> [f64; 2] {
        match loc {
            Location::Nodes => self.node_coord(idx),
            Location::Cells => self.cell_coord(idx),
        }
    }

    pub fn is_boundary_node(&self, idx: usize) -> bool {
        let (i, j) = self.node_ij(idx);
        i == 0 || i + 1 == self.nodes[0] || (self.dim == 2 && (j == 0 || j + 1 == self.nodes[1]))
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| self.is_boundary_node(n)).collect()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| !self.is_boundary_node(n)).collect()
    }

    /// Samples `f` at every point of `loc`.
    pub fn sample(&self, loc: Location, f: impl Fn([f64; 2]) -> f64) -> ScalarField {
        ScalarField::new(loc, (0..self.len(loc)).map(|i| f(self.coord(loc, i))).collect())
    }

    /// Samples a vector function at the nodes; boundary values are forced to zero when
    /// `dirichlet` is set.
    pub fn sample_vector(&self, dirichlet: bool, f: impl Fn([f64; 2]) -> [f64; 2]) -> VectorField {
        let d = self.dim;
        let mut values = vec![0.0; self.n_nodes() * d];
        for n in 0..self.n_nodes() {
            if dirichlet && self.is_boundary_node(n) {
                continue;
            }
            let v = f(self.node_coord(n));
            values[n * d..n * d + d].copy_from_slice(&v[..d]);
        }
        VectorField { dim: d, values, dirichlet }
    }

    /// Quadrature weights: tensor trapezoid for nodes, midpoint for cells.
    pub fn weights(&self, loc: Location) -> Vec<f64> {
        match loc {
            Location::Cells => vec![self.cell_volume(); self.n_cells()],
            Location::Nodes => (0..self.n_nodes())
                .map(|n| {
                    let (i, j) = self.node_ij(n);
                    let mut w = self.spacing[0];
                    if i == 0 || i + 1 == self.nodes[0] {
                        w *= 0.5;
                    }
                    if self.dim == 2 {
                        w *= self.spacing[1];
                        if j == 0 || j + 1 == self.nodes[1] {
                            w *= 0.5;
                        }
                    }
                    w
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScalarField {
    pub loc: Location,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(loc: Location, values: Vec<f64>) -> Self {
        Self { loc, values }
    }

    pub fn zeros(grid: &Grid, loc: Location) -> Self {
        Self::new(loc, vec![0.0; grid.len(loc)])
    }

    pub fn constant(grid: &Grid, loc: Location, c: f64) -> Self {
        Self::new(loc, vec![c; grid.len(loc)])
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.values.len() != grid.len(self.loc) {
            return Err(Error::Shape(format!(
                "{:?} field has {} values, grid expects {}",
                self.loc,
                self.values.len(),
                grid.len(self.loc)
            )));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// CSV with columns `index,x[,y],<name>`, 17 significant digits.
    pub fn to_csv(&self, grid: &Grid, name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "index,x{},{}", if grid.dim() == 2 { ",y" } else { "" }, name);
        for (i, v) in self.values.iter().enumerate() {
            let c = grid.coord(self.loc, i);
            let _ = write!(out, "{i},{:.16e}", c[0]);
            if grid.dim() == 2 {
                let _ = write!(out, ",{:.16e}", c[1]);
            }
            let _ = writeln!(out, ",{v:.16e}");
        }
        out
    }
}

/// Node-based vector field, node-major storage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VectorField {
    pub dim: usize,
    pub values: Vec<f64>,
    /// Boundary values are identically zero.
    pub dirichlet: bool,
}

impl VectorField {
    pub fn zeros(grid: &Grid, dirichlet: bool) -> Self {
        Self { dim: grid.dim(), values: vec![0.0; grid.n_nodes() * grid.dim()], dirichlet }
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.dim != grid.dim() || self.values.len() != grid.n_nodes() * grid.dim() {
            return Err(Error::Shape(format!(
                "vector field of dim {} with {} values on a {}D grid with {} nodes",
                self.dim,
                self.values.len(),
                grid.dim(),
                grid.n_nodes()
            )));
        }
        Ok(())
    }

    pub fn at(&self, node: usize) -> [f64; 2] {
        let mut out = [0.0; 2];
        out[..self.dim].copy_from_slice(&self.values[node * self.dim..(node + 1) * self.dim]);
        out
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.dim).copied().collect()
    }

    /// Zeroes boundary entries and sets the Dirichlet flag.
    pub fn apply_dirichlet(&mut self, grid: &Grid) {
        for n in grid.boundary_nodes() {
            for c in 0..self.dim {
                self.values[n * self.dim + c] = 0.0;
            }
        }
        self.dirichlet = true;
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_csv(&self, grid: &Grid, name: &str) -> String {
        let mut out = String::new();
        let _ = write!(out, "index,x{}", if grid.dim() == 2 { ",y" } else { "" });
        for c in 0..self.dim {
            let _ = write!(out, ",{name}_{c}");
        }
        out.push('\n');
        for n in 0..grid.n_nodes() {
            let c = grid.node_coord(n);
            let _ = write!(out, "{n},{:.16e}", c[0]);
            if grid.dim() == 2 {
                let _ = write!(out, ",{:.16e}", c[1]);
            }
            for k in 0..self.dim {
                let _ = write!(out, ",{:.16e}", self.values[n * self.dim + k]);
            }
            out.push('\n');
        }
        out
    }
}

/// Composite quadrature of a field, optionally weighted pointwise by a second field at the
/// same location. Summation order is fixed (index order).
pub fn integrate(grid: &Grid, field: &ScalarField, weight: Option<&ScalarField>) -> Result<f64> {
    field.check(grid)?;
    let w = grid.weights(field.loc);
    match weight {
        None => Ok(field.values.iter().zip(&w).map(|(f, w)| f * w).sum()),
        Some(g) => {
            g.check(grid)?;
            if g.loc != field.loc {
                return Err(Error::Shape("weight lives at a different location".into()));
            }
            Ok(field.values.iter().zip(&g.values).zip(&w).map(|((f, g), w)| f * g * w).sum())
        }
    }
}

/// Sparse matrix-vector product `y = A x`.
pub fn spmv(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.cols(), x.len());
    let mut y = vec![0.0; a.rows()];
    for (row, vec) in a.outer_iterator().enumerate() {
        let mut acc = 0.0;
        for (col, &val) in vec.iter() {
            acc += val * x[col];
        }
        y[row] = acc;
    }
    y
}

// ---------------------------------------------------------------------------
// 1D building blocks

struct Blocks1d {
    /// node -> node first derivative, central inside, one-sided second order at the ends
    dn: CsMat<f64>,
    /// node -> node second derivative
    dnn: CsMat<f64>,
    /// node -> cell first derivative
    dnc: CsMat<f64>,
    /// cell -> node first derivative
    dcn: CsMat<f64>,
    /// node -> cell average
    inc: CsMat<f64>,
    /// cell -> node interpolation (linear extrapolation at the ends)
    icn: CsMat<f64>,
    id_n: CsMat<f64>,
}

impl Blocks1d {
    fn new(n: usize, h: f64) -> Self {
        let c = n - 1;
        let mut dn = TriMat::new((n, n));
        let mut dnn = TriMat::new((n, n));
        let mut dnc = TriMat::new((c, n));
        let mut dcn = TriMat::new((n, c));
        let mut inc = TriMat::new((c, n));
        let mut icn = TriMat::new((n, c));
        for i in 1..n - 1 {
            dn.add_triplet(i, i - 1, -0.5 / h);
            dn.add_triplet(i, i + 1, 0.5 / h);
            dnn.add_triplet(i, i - 1, 1.0 / (h * h));
            dnn.add_triplet(i, i, -2.0 / (h * h));
            dnn.add_triplet(i, i + 1, 1.0 / (h * h));
            dcn.add_triplet(i, i - 1, -1.0 / h);
            dcn.add_triplet(i, i, 1.0 / h);
            icn.add_triplet(i, i - 1, 0.5);
            icn.add_triplet(i, i, 0.5);
        }
        for (k, w) in [(0, -1.5), (1, 2.0), (2, -0.5)] {
            dn.add_triplet(0, k, w / h);
            dn.add_triplet(n - 1, n - 1 - k, -w / h);
        }
        if n >= 4 {
            for (k, w) in [(0, 2.0), (1, -5.0), (2, 4.0), (3, -1.0)] {
                dnn.add_triplet(0, k, w / (h * h));
                dnn.add_triplet(n - 1, n - 1 - k, w / (h * h));
            }
        } else {
            for (k, w) in [(0, 1.0), (1, -2.0), (2, 1.0)] {
                dnn.add_triplet(0, k, w / (h * h));
                dnn.add_triplet(n - 1, n - 1 - k, w / (h * h));
            }
        }
        if c >= 3 {
            for (k, w) in [(0, -2.0), (1, 3.0), (2, -1.0)] {
                dcn.add_triplet(0, k, w / h);
                dcn.add_triplet(n - 1, c - 1 - k, -w / h);
            }
        } else {
            dcn.add_triplet(0, 0, -1.0 / h);
            dcn.add_triplet(0, 1, 1.0 / h);
            dcn.add_triplet(n - 1, c - 2, -1.0 / h);
            dcn.add_triplet(n - 1, c - 1, 1.0 / h);
        }
        icn.add_triplet(0, 0, 1.5);
        icn.add_triplet(0, 1, -0.5);
        icn.add_triplet(n - 1, c - 1, 1.5);
        icn.add_triplet(n - 1, c - 2, -0.5);
        for i in 0..c {
            dnc.add_triplet(i, i, -1.0 / h);
            dnc.add_triplet(i, i + 1, 1.0 / h);
            inc.add_triplet(i, i, 0.5);
            inc.add_triplet(i, i + 1, 0.5);
        }
        Self {
            dn: dn.to_csr(),
            dnn: dnn.to_csr(),
            dnc: dnc.to_csr(),
            dcn: dcn.to_csr(),
            inc: inc.to_csr(),
            icn: icn.to_csr(),
            id_n: CsMat::eye(n),
        }
    }

    fn trivial() -> Self {
        let one = CsMat::eye(1);
        Self {
            dn: one.clone(),
            dnn: one.clone(),
            dnc: one.clone(),
            dcn: one.clone(),
            inc: one.clone(),
            icn: one.clone(),
            id_n: one,
        }
    }
}

/// Kronecker product `a (x) b`.
pub fn kron(a: &CsMat<f64>, b: &CsMat<f64>) -> CsMat<f64> {
    let mut t = TriMat::new((a.rows() * b.rows(), a.cols() * b.cols()));
    for (ar, avec) in a.outer_iterator().enumerate() {
        for (ac, &av) in avec.iter() {
            for (br, bvec) in b.outer_iterator().enumerate() {
                for (bc, &bv) in bvec.iter() {
                    t.add_triplet(ar * b.rows() + br, ac * b.cols() + bc, av * bv);
                }
            }
        }
    }
    t.to_csr()
}

/// Embeds a scalar operator as the `(row_c, col_c)` block of a node-major vector operator.
fn add_block(t: &mut TriMat<f64>, m: &CsMat<f64>, row_stride: usize, row_c: usize, col_stride: usize, col_c: usize, scale: f64) {
    for (r, vec) in m.outer_iterator().enumerate() {
        for (c, &v) in vec.iter() {
            t.add_triplet(r * row_stride + row_c, c * col_stride + col_c, scale * v);
        }
    }
}

/// Drops explicit zeros and sums duplicates.
pub fn compress(m: &CsMat<f64>) -> CsMat<f64> {
    let mut t = TriMat::new(m.shape());
    for (r, vec) in m.outer_iterator().enumerate() {
        for (c, &v) in vec.iter() {
            if v != 0.0 {
                t.add_triplet(r, c, v);
            }
        }
    }
    t.to_csr()
}

/// Sparse difference operators of a grid.
///
/// Naming: `*_n` act on node values, `*_c` on cell values. Each axis operator is a scalar
/// operator; `d` below is the grid dimension.
#[derive(Debug, Clone)]
pub struct DiffOps {
    pub grid: Grid,
    /// node -> node first derivatives per axis
    pub d_n: Vec<CsMat<f64>>,
    /// node -> node second derivatives `[xx, yy, xy]` (only `xx` in 1D)
    pub d2_n: Vec<CsMat<f64>>,
    /// node -> cell first derivatives per axis
    pub d_nc: Vec<CsMat<f64>>,
    /// cell -> node first derivatives per axis
    pub d_cn: Vec<CsMat<f64>>,
    pub interp_nc: CsMat<f64>,
    pub interp_cn: CsMat<f64>,
    /// cell -> node plain average over the adjacent cells (positivity preserving)
    pub avg_cn: CsMat<f64>,
    div_m: CsMat<f64>,
    grad_c_m: CsMat<f64>,
    lap_m: CsMat<f64>,
    grad_div_m: CsMat<f64>,
}

impl DiffOps {
    pub fn new(grid: &Grid) -> Self {
        let [nx, ny] = grid.node_counts();
        let [hx, hy] = grid.spacing();
        let bx = Blocks1d::new(nx, hx);
        let by = if grid.dim() == 2 { Blocks1d::new(ny, hy) } else { Blocks1d::trivial() };
        let mut d_n = vec![kron(&by.id_n, &bx.dn)];
        let mut d2_n = vec![kron(&by.id_n, &bx.dnn)];
        let mut d_nc = vec![kron(&by.inc, &bx.dnc)];
        let mut d_cn = vec![kron(&by.icn, &bx.dcn)];
        if grid.dim() == 2 {
            d_n.push(kron(&by.dn, &bx.id_n));
            d2_n.push(kron(&by.dnn, &bx.id_n));
            d2_n.push(kron(&by.dn, &bx.dn));
            d_nc.push(kron(&by.dnc, &bx.inc));
            d_cn.push(kron(&by.dcn, &bx.icn));
        }
        let empty = CsMat::zero((0, 0));
        let mut ops = Self {
            grid: grid.clone(),
            d_n,
            d2_n,
            d_nc,
            d_cn,
            interp_nc: kron(&by.inc, &bx.inc),
            interp_cn: kron(&by.icn, &bx.icn),
            avg_cn: node_average_matrix(grid),
            div_m: empty.clone(),
            grad_c_m: empty.clone(),
            lap_m: empty.clone(),
            grad_div_m: empty,
        };
        ops.div_m = ops.build_div();
        ops.grad_c_m = ops.build_grad_cells();
        ops.lap_m = ops.build_vector_laplacian();
        ops.grad_div_m = ops.build_grad_div();
        ops
    }

    fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Second derivative operator `d^2 / dy_a dy_b` on nodes.
    pub fn d2(&self, a: usize, b: usize) -> &CsMat<f64> {
        match (a, b) {
            (0, 0) => &self.d2_n[0],
            (1, 1) => &self.d2_n[1],
            _ => &self.d2_n[2],
        }
    }

    /// Staggered divergence, node vectors -> cell scalars, as a sparse matrix.
    pub fn div_matrix(&self) -> &CsMat<f64> {
        &self.div_m
    }

    /// Staggered gradient, cell scalars -> node vectors.
    pub fn grad_cells_matrix(&self) -> &CsMat<f64> {
        &self.grad_c_m
    }

    /// Componentwise compact Laplacian on node vectors.
    pub fn vector_laplacian_matrix(&self) -> &CsMat<f64> {
        &self.lap_m
    }

    /// Compact `grad div` on node vectors: component `j` is `sum_i d_j d_i v_i`.
    pub fn grad_div_matrix(&self) -> &CsMat<f64> {
        &self.grad_div_m
    }

    fn build_div(&self) -> CsMat<f64> {
        let d = self.dim();
        let mut t = TriMat::new((self.grid.n_cells(), self.grid.n_nodes() * d));
        for a in 0..d {
            add_block(&mut t, &self.d_nc[a], 1, 0, d, a, 1.0);
        }
        t.to_csr()
    }

    fn build_grad_cells(&self) -> CsMat<f64> {
        let d = self.dim();
        let mut t = TriMat::new((self.grid.n_nodes() * d, self.grid.n_cells()));
        for a in 0..d {
            add_block(&mut t, &self.d_cn[a], d, a, 1, 0, 1.0);
        }
        t.to_csr()
    }

    fn build_vector_laplacian(&self) -> CsMat<f64> {
        let d = self.dim();
        let n = self.grid.n_nodes() * d;
        let mut t = TriMat::new((n, n));
        for c in 0..d {
            for a in 0..d {
                add_block(&mut t, self.d2(a, a), d, c, d, c, 1.0);
            }
        }
        t.to_csr()
    }

    fn build_grad_div(&self) -> CsMat<f64> {
        let d = self.dim();
        let n = self.grid.n_nodes() * d;
        let mut t = TriMat::new((n, n));
        for j in 0..d {
            for i in 0..d {
                add_block(&mut t, self.d2(j, i), d, j, d, i, 1.0);
            }
        }
        t.to_csr()
    }

    fn mask_boundary(&self, out: &mut VectorField) {
        if out.dirichlet {
            out.apply_dirichlet(&self.grid);
        }
    }

    /// Gradient of a scalar field, always returned on nodes.
    pub fn grad(&self, f: &ScalarField) -> Result<VectorField> {
        f.check(&self.grid)?;
        let d = self.dim();
        let ops = match f.loc {
            Location::Nodes => &self.d_n,
            Location::Cells => &self.d_cn,
        };
        let mut values = vec![0.0; self.grid.n_nodes() * d];
        for (a, op) in ops.iter().enumerate() {
            for (n, v) in spmv(op, &f.values).into_iter().enumerate() {
                values[n * d + a] = v;
            }
        }
        Ok(VectorField { dim: d, values, dirichlet: false })
    }

    /// Staggered divergence of a node vector field, returned on cells.
    pub fn div(&self, v: &VectorField) -> Result<ScalarField> {
        v.check(&self.grid)?;
        Ok(ScalarField::new(Location::Cells, spmv(&self.div_m, &v.values)))
    }

    /// Central divergence of a node vector field, returned on nodes.
    pub fn div_nodes(&self, v: &VectorField) -> Result<ScalarField> {
        v.check(&self.grid)?;
        let d = self.dim();
        let mut out = vec![0.0; self.grid.n_nodes()];
        for a in 0..d {
            let comp = v.component(a);
            for (o, x) in out.iter_mut().zip(spmv(&self.d_n[a], &comp)) {
                *o += x;
            }
        }
        Ok(ScalarField::new(Location::Nodes, out))
    }

    /// Laplacian of a node scalar field.
    pub fn laplacian(&self, f: &ScalarField) -> Result<ScalarField> {
        f.check(&self.grid)?;
        if f.loc != Location::Nodes {
            return Err(Error::Shape("laplacian is defined on node fields".into()));
        }
        let mut out = vec![0.0; self.grid.n_nodes()];
        for a in 0..self.dim() {
            for (o, x) in out.iter_mut().zip(spmv(self.d2(a, a), &f.values)) {
                *o += x;
            }
        }
        Ok(ScalarField::new(Location::Nodes, out))
    }

    /// Componentwise Laplacian of a node vector field. Dirichlet fields keep zero boundary values.
    pub fn vector_laplacian(&self, v: &VectorField) -> Result<VectorField> {
        v.check(&self.grid)?;
        let mut out = VectorField { dim: v.dim, values: spmv(&self.lap_m, &v.values), dirichlet: v.dirichlet };
        self.mask_boundary(&mut out);
        Ok(out)
    }

    pub fn grad_div(&self, v: &VectorField) -> Result<VectorField> {
        v.check(&self.grid)?;
        let mut out = VectorField { dim: v.dim, values: spmv(&self.grad_div_m, &v.values), dirichlet: v.dirichlet };
        self.mask_boundary(&mut out);
        Ok(out)
    }

    /// Velocity gradient at nodes, `J[(a, b)] = d v_b / d y_a` (derivative index first).
    pub fn jacobian_nodes(&self, v: &VectorField) -> Result<Vec<Matrix2<f64>>> {
        v.check(&self.grid)?;
        let d = self.dim();
        let mut out = vec![Matrix2::zeros(); self.grid.n_nodes()];
        for b in 0..d {
            let comp = v.component(b);
            for a in 0..d {
                for (m, x) in out.iter_mut().zip(spmv(&self.d_n[a], &comp)) {
                    m[(a, b)] = x;
                }
            }
        }
        Ok(out)
    }

    /// Velocity gradient at cell centres, same index convention as [`Self::jacobian_nodes`].
    pub fn jacobian_cells(&self, v: &VectorField) -> Result<Vec<Matrix2<f64>>> {
        v.check(&self.grid)?;
        let d = self.dim();
        let mut out = vec![Matrix2::zeros(); self.grid.n_cells()];
        for b in 0..d {
            let comp = v.component(b);
            for a in 0..d {
                for (m, x) in out.iter_mut().zip(spmv(&self.d_nc[a], &comp)) {
                    m[(a, b)] = x;
                }
            }
        }
        Ok(out)
    }

    /// Second derivatives at nodes: `H[l][(a, b)] = d^2 v_b / dy_l dy_a`.
    pub fn hessian_nodes(&self, v: &VectorField) -> Result<Vec<[Matrix2<f64>; 2]>> {
        v.check(&self.grid)?;
        let d = self.dim();
        let mut out = vec![[Matrix2::zeros(); 2]; self.grid.n_nodes()];
        for b in 0..d {
            let comp = v.component(b);
            for l in 0..d {
                for a in l..d {
                    for (m, x) in out.iter_mut().zip(spmv(self.d2(l, a), &comp)) {
                        m[l][(a, b)] = x;
                        m[a][(l, b)] = x;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn cells_to_nodes(&self, f: &[f64]) -> Vec<f64> {
        spmv(&self.interp_cn, f)
    }

    pub fn nodes_to_cells(&self, f: &[f64]) -> Vec<f64> {
        spmv(&self.interp_nc, f)
    }

    /// Average of the adjacent cell values at every node. First order at the boundary,
    /// but never leaves the range of the cell data.
    pub fn node_average(&self, f: &[f64]) -> Vec<f64> {
        spmv(&self.avg_cn, f)
    }
}

fn node_average_matrix(grid: &Grid) -> CsMat<f64> {
    let [nx, ny] = grid.node_counts();
    let (cx, cy) = (nx - 1, if grid.dim() == 2 { ny - 1 } else { 1 });
    let mut t = TriMat::new((grid.n_nodes(), grid.n_cells()));
    for n in 0..grid.n_nodes() {
        let (i, j) = grid.node_ij(n);
        let xs: Vec<usize> = [i.checked_sub(1), (i < cx).then_some(i)].into_iter().flatten().collect();
        let ys: Vec<usize> = if grid.dim() == 2 {
            [j.checked_sub(1), (j < cy).then_some(j)].into_iter().flatten().collect()
        } else {
            vec![0]
        };
        let w = 1.0 / (xs.len() * ys.len()) as f64;
        for &b in &ys {
            for &a in &xs {
                t.add_triplet(n, a + cx * b, w);
            }
        }
    }
    t.to_csr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn grid_validation() {
        assert!(Grid::interval(0.0, 1.0, 2).is_err());
        assert!(Grid::interval(1.0, 1.0, 5).is_err());
        assert!(Grid::rectangle([0.0, 0.0], [1.0, 1.0], 5, 2).is_err());
        let g = Grid::unit_interval(16).unwrap();
        assert_eq!(g.n_nodes(), 17);
        assert_eq!(g.n_cells(), 16);
        assert_eq!(g.boundary_nodes(), vec![0, 16]);
        let g2 = Grid::rectangle([0.0, 0.0], [1.0, 2.0], 5, 9).unwrap();
        assert_eq!(g2.spacing(), [0.25, 0.25]);
        assert_eq!(g2.boundary_nodes().len(), 2 * 5 + 2 * 7);
    }

    #[test]
    fn integrate_examples() {
        let g = Grid::interval(0.0, 1.0, 11).unwrap();
        let one = ScalarField::constant(&g, Location::Nodes, 1.0);
        assert_relative_eq!(integrate(&g, &one, None).unwrap(), 1.0, max_relative = 1e-15);
        let x = g.sample(Location::Nodes, |c| c[0]);
        assert_relative_eq!(integrate(&g, &x, None).unwrap(), 0.5, max_relative = 1e-15);
        let xc = g.sample(Location::Cells, |c| c[0]);
        assert_relative_eq!(integrate(&g, &xc, None).unwrap(), 0.5, max_relative = 1e-15);
        let mut errs = vec![];
        for n in [16, 32, 64] {
            let g = Grid::unit_interval(n).unwrap();
            let s = g.sample(Location::Nodes, |c| (PI * c[0]).sin());
            errs.push((integrate(&g, &s, None).unwrap() - 2.0 / PI).abs());
        }
        assert!((errs[0] / errs[1]).log2() > 1.95 && (errs[1] / errs[2]).log2() > 1.95);
        let bad = ScalarField::new(Location::Nodes, vec![1.0; 3]);
        assert!(integrate(&g, &bad, None).is_err());
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        for g in [Grid::unit_interval(8).unwrap(), Grid::rectangle([0.0, 0.0], [1.0, 1.0], 6, 7).unwrap()] {
            let ops = DiffOps::new(&g);
            for loc in [Location::Nodes, Location::Cells] {
                let f = ScalarField::constant(&g, loc, 3.5);
                assert!(ops.grad(&f).unwrap().max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn laplacian_exact_for_quadratics() {
        let g = Grid::interval(-1.0, 2.0, 13).unwrap();
        let ops = DiffOps::new(&g);
        let f = g.sample(Location::Nodes, |c| c[0] * c[0]);
        for v in ops.laplacian(&f).unwrap().values {
            assert_relative_eq!(v, 2.0, max_relative = 1e-12);
        }
        let g2 = Grid::rectangle([0.0, 0.0], [1.0, 1.0], 7, 9).unwrap();
        let ops2 = DiffOps::new(&g2);
        let f2 = g2.sample(Location::Nodes, |c| c[0] * c[0] + 3.0 * c[0] * c[1] - c[1] * c[1]);
        for v in ops2.laplacian(&f2).unwrap().values {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn staggered_pairs_are_exact_for_linear_data() {
        let g = Grid::rectangle([0.0, 0.0], [2.0, 1.0], 9, 6).unwrap();
        let ops = DiffOps::new(&g);
        let s = g.sample(Location::Cells, |c| 2.0 * c[0] - 3.0 * c[1] + 1.0);
        let gs = ops.grad(&s).unwrap();
        for n in 0..g.n_nodes() {
            assert_relative_eq!(gs.at(n)[0], 2.0, max_relative = 1e-12);
            assert_relative_eq!(gs.at(n)[1], -3.0, max_relative = 1e-12);
        }
        let v = g.sample_vector(false, |c| [c[0] + c[1], 4.0 * c[1]]);
        for x in ops.div(&v).unwrap().values {
            assert_relative_eq!(x, 5.0, max_relative = 1e-12);
        }
    }

    fn order(errs: &[f64]) -> Vec<f64> {
        errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
    }

    #[test]
    fn second_order_convergence_1d() {
        let mut e = [vec![], vec![], vec![], vec![], vec![]];
        for n in [16, 32, 64, 128] {
            let g = Grid::unit_interval(n).unwrap();
            let ops = DiffOps::new(&g);
            let f = g.sample(Location::Nodes, |c| (PI * c[0]).sin());
            let lap = ops.laplacian(&f).unwrap();
            e[0].push(lap.values.iter().enumerate().map(|(i, v)| (v + PI * PI * (PI * g.node_coord(i)[0]).sin()).abs()).fold(0.0, f64::max));
            let gr = ops.grad(&f).unwrap();
            e[1].push(gr.values.iter().enumerate().map(|(i, v)| (v - PI * (PI * g.node_coord(i)[0]).cos()).abs()).fold(0.0, f64::max));
            // div(grad) through the staggered pair against the analytic Laplacian
            let fc = g.sample(Location::Cells, |c| (PI * c[0]).sin());
            let dg = ops.div(&ops.grad(&fc).unwrap()).unwrap();
            // boundary cells see the one-sided wall gradient and are first order only
            e[2].push(dg.values.iter().enumerate().skip(1).take(n - 2).map(|(i, v)| (v + PI * PI * (PI * g.cell_coord(i)[0]).sin()).abs()).fold(0.0, f64::max));
            let gc = ops.grad(&fc).unwrap();
            e[3].push(gc.values.iter().enumerate().map(|(i, v)| (v - PI * (PI * g.node_coord(i)[0]).cos()).abs()).fold(0.0, f64::max));
            let interp = ops.cells_to_nodes(&fc.values);
            e[4].push(interp.iter().enumerate().map(|(i, v)| (v - (PI * g.node_coord(i)[0]).sin()).abs()).fold(0.0, f64::max));
        }
        for errs in &e {
            for o in order(errs) {
                assert!(o > 1.8, "order {o} from {errs:?}");
            }
        }
    }

    #[test]
    fn second_order_convergence_2d() {
        let mut e_lap = vec![];
        let mut e_gd = vec![];
        for n in [9, 17, 33] {
            let g = Grid::rectangle([0.0, 0.0], [1.0, 1.0], n, n).unwrap();
            let ops = DiffOps::new(&g);
            let v = g.sample_vector(true, |c| [(PI * c[0]).sin() * (PI * c[1]).sin(), (PI * c[0]).sin() * (2.0 * PI * c[1]).sin()]);
            let lap = ops.vector_laplacian(&v).unwrap();
            let gd = ops.grad_div(&v).unwrap();
            let mut el: f64 = 0.0;
            let mut eg: f64 = 0.0;
            for node in g.interior_nodes() {
                let [x, y] = g.node_coord(node);
                let (sx, cx, sy, cy) = ((PI * x).sin(), (PI * x).cos(), (PI * y).sin(), (PI * y).cos());
                let (s2y, c2y) = ((2.0 * PI * y).sin(), (2.0 * PI * y).cos());
                el = el.max((lap.at(node)[0] + 2.0 * PI * PI * sx * sy).abs());
                el = el.max((lap.at(node)[1] + 5.0 * PI * PI * sx * s2y).abs());
                // div v = pi cx sy + 2 pi sx c2y
                let gx = -PI * PI * sx * sy + 2.0 * PI * PI * cx * c2y;
                let gy = PI * PI * cx * cy - 4.0 * PI * PI * sx * s2y;
                eg = eg.max((gd.at(node)[0] - gx).abs()).max((gd.at(node)[1] - gy).abs());
            }
            for node in g.boundary_nodes() {
                assert_eq!(lap.at(node), [0.0, 0.0]);
                assert_eq!(gd.at(node), [0.0, 0.0]);
            }
            e_lap.push(el);
            e_gd.push(eg);
        }
        for o in order(&e_lap).into_iter().chain(order(&e_gd)) {
            assert!(o > 1.8, "order {o}");
        }
    }

    #[test]
    fn operators_are_linear() {
        let g = Grid::rectangle([0.0, 0.0], [1.0, 1.0], 6, 5).unwrap();
        let ops = DiffOps::new(&g);
        let f = g.sample_vector(false, |c| [c[0].exp(), (c[1] * 3.0).sin()]);
        let h = g.sample_vector(false, |c| [c[0] * c[1], c[0] - c[1]]);
        let (a, b) = (1.7, -0.3);
        let comb = VectorField { dim: 2, values: f.values.iter().zip(&h.values).map(|(x, y)| a * x + b * y).collect(), dirichlet: false };
        let lhs = ops.grad_div(&comb).unwrap();
        let (gf, gh) = (ops.grad_div(&f).unwrap(), ops.grad_div(&h).unwrap());
        for i in 0..lhs.values.len() {
            assert!((lhs.values[i] - (a * gf.values[i] + b * gh.values[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_errors() {
        let g = Grid::unit_interval(8).unwrap();
        let g2 = Grid::rectangle([0.0, 0.0], [1.0, 1.0], 4, 4).unwrap();
        let ops = DiffOps::new(&g);
        let v2 = VectorField::zeros(&g2, true);
        assert!(matches!(ops.div(&v2), Err(Error::Shape(_))));
        let c = ScalarField::zeros(&g, Location::Cells);
        assert!(ops.laplacian(&c).is_err());
    }

    #[test]
    fn csv_has_full_precision() {
        let g = Grid::interval(0.0, 1.0, 3).unwrap();
        let f = ScalarField::new(Location::Nodes, vec![0.1, 1.0 / 3.0, 2.0]);
        let csv = f.to_csv(&g, "r");
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "index,x,r");
        let val: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(val, 1.0 / 3.0);
    }
}
