//! Plant description and matrix assembly.
//!
//! Each DG carries the state `[V, I_t, v]` (PCC voltage, filter current,
//! integral of the voltage error) and each line its current `I_l`. Lines are
//! oriented tail -> head, the tail being the lower DG index.

use nalgebra::{DMatrix, DVector};
use petgraph::unionfind::UnionFind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::DcmgError;

/// Rated powers of the four reference DGs, cycled for larger networks.
pub const TABLE_RATINGS: [f64; 4] = [800.0, 700.0, 700.0, 900.0];
pub const V_REF: f64 = 48.0;
pub const V_SOURCE: f64 = 120.0;

const MAX_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgParams {
    pub r_t: f64,
    pub l_t: f64,
    pub c_t: f64,
    pub y_l: f64,
    pub i_l_bar: f64,
    pub p_n: f64,
    pub v_r: f64,
    #[serde(default)]
    pub sigma_v2: f64,
    #[serde(default)]
    pub sigma_c2: f64,
}

impl DgParams {
    /// Nominal converter and load values of the reference system.
    pub fn nominal(p_n: f64) -> Self {
        DgParams {
            r_t: 0.05,
            l_t: 0.01,
            c_t: 2.2e-3,
            y_l: 0.2,
            i_l_bar: 3.0,
            p_n,
            v_r: V_REF,
            sigma_v2: 0.5,
            sigma_c2: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), DcmgError> {
        let pos = [("R_t", self.r_t), ("L_t", self.l_t), ("C_t", self.c_t), ("P_n", self.p_n), ("V_r", self.v_r)];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(DcmgError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [("Y_L", self.y_l), ("sigma_v2", self.sigma_v2), ("sigma_c2", self.sigma_c2)];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DcmgError::Invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !self.i_l_bar.is_finite() {
            return Err(DcmgError::Invalid("I_L_bar must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    pub r_l: f64,
    pub l_l: f64,
    #[serde(default)]
    pub sigma_l2: f64,
    pub tail: usize,
    pub head: usize,
}

impl LineParams {
    pub fn nominal(tail: usize, head: usize) -> Self {
        LineParams { r_l: 0.02, l_l: 0.01, sigma_l2: 0.5, tail, head }
    }
}

/// Undirected DG graph with oriented edges (one per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalTopology {
    pub n_dgs: usize,
    pub edges: Vec<(usize, usize)>,
}

impl PhysicalTopology {
    pub fn new(n_dgs: usize, edges: Vec<(usize, usize)>) -> Result<Self, DcmgError> {
        let t = PhysicalTopology { n_dgs, edges };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), DcmgError> {
        if self.n_dgs == 0 {
            return Err(DcmgError::Invalid("network needs at least one DG".into()));
        }
        for (l, &(a, b)) in self.edges.iter().enumerate() {
            if a >= self.n_dgs || b >= self.n_dgs {
                return Err(DcmgError::Invalid(format!("line {l} has an endpoint outside 0..{}", self.n_dgs)));
            }
            if a == b {
                return Err(DcmgError::Invalid(format!("line {l} is a self loop at DG {a}")));
            }
        }
        if !self.is_connected() {
            return Err(DcmgError::Invalid("physical topology is not connected".into()));
        }
        Ok(())
    }

    pub fn n_lines(&self) -> usize {
        self.edges.len()
    }

    pub fn is_connected(&self) -> bool {
        connected(self.n_dgs, &self.edges)
    }

    /// N x L signed incidence: +1 at the tail, -1 at the head.
    pub fn bi_adjacency(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n_dgs, self.edges.len());
        for (l, &(a, h)) in self.edges.iter().enumerate() {
            b[(a, l)] = 1.0;
            b[(h, l)] = -1.0;
        }
        b
    }

    /// Symmetric DG adjacency (true where some line joins i and j).
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let mut adj = vec![vec![false; self.n_dgs]; self.n_dgs];
        for &(a, b) in &self.edges {
            adj[a][b] = true;
            adj[b][a] = true;
        }
        adj
    }

    /// Lines incident to DG `i`.
    pub fn incident(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, &(a, b))| a == i || b == i)
            .map(|(l, _)| l)
            .collect()
    }
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n <= 1 {
        return true;
    }
    let mut uf = UnionFind::<usize>::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    let root = uf.find(0);
    (1..n).all(|i| uf.find(i) == root)
}

/// Output of the geometric generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTopology {
    pub topology: PhysicalTopology,
    pub positions: Vec<[f64; 2]>,
    pub distances: DMatrix<f64>,
    pub resamples: usize,
}

/// Random geometric graph in the unit square, resampled until connected.
pub fn random_geometric_topology(
    n_dgs: usize,
    connectivity: f64,
    seed: u64,
) -> Result<GeneratedTopology, DcmgError> {
    if n_dgs == 0 {
        return Err(DcmgError::Invalid("n_dgs must be at least 1".into()));
    }
    if !(connectivity > 0.0 && connectivity <= 1.0) {
        return Err(DcmgError::Invalid(format!("connectivity must lie in (0, 1], got {connectivity}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..MAX_RESAMPLES {
        let pos: Vec<[f64; 2]> = (0..n_dgs).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let dist = DMatrix::from_fn(n_dgs, n_dgs, |i, j| {
            ((pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2)).sqrt()
        });
        let mut edges = Vec::new();
        for i in 0..n_dgs {
            for j in i + 1..n_dgs {
                if dist[(i, j)] <= connectivity {
                    edges.push((i, j));
                }
            }
        }
        if connected(n_dgs, &edges) {
            return Ok(GeneratedTopology {
                topology: PhysicalTopology { n_dgs, edges },
                positions: pos,
                distances: dist,
                resamples: attempt,
            });
        }
    }
    Err(DcmgError::Invalid(format!(
        "no connected layout for {n_dgs} DGs at connectivity {connectivity} after {MAX_RESAMPLES} draws"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrogridSpec {
    pub dgs: Vec<DgParams>,
    pub lines: Vec<LineParams>,
    pub v_nom: f64,
    pub v_base: f64,
}

impl MicrogridSpec {
    /// Reference parameters on the given topology. With `seed`, every DG,
    /// load and line parameter is scaled by an independent
    /// Uniform(1 - spread, 1 + spread) draw.
    pub fn reference(topology: &PhysicalTopology, seed: Option<u64>, spread: f64) -> Self {
        let mut dgs: Vec<DgParams> =
            (0..topology.n_dgs).map(|i| DgParams::nominal(TABLE_RATINGS[i % 4])).collect();
        let mut lines: Vec<LineParams> =
            topology.edges.iter().map(|&(a, b)| LineParams::nominal(a, b)).collect();
        if let Some(seed) = seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || 1.0 + spread * (2.0 * rng.random::<f64>() - 1.0);
            for d in &mut dgs {
                d.r_t *= draw();
                d.l_t *= draw();
                d.c_t *= draw();
                d.y_l *= draw();
                d.i_l_bar *= draw();
                d.p_n *= draw();
            }
            for l in &mut lines {
                l.r_l *= draw();
                l.l_l *= draw();
            }
        }
        MicrogridSpec { dgs, lines, v_nom: V_SOURCE, v_base: V_REF }
    }

    pub fn n(&self) -> usize {
        self.dgs.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn topology(&self) -> PhysicalTopology {
        PhysicalTopology {
            n_dgs: self.dgs.len(),
            edges: self.lines.iter().map(|l| (l.tail, l.head)).collect(),
        }
    }

    pub fn bi_adjacency(&self) -> DMatrix<f64> {
        self.topology().bi_adjacency()
    }

    /// I_n,i = P_n,i / V_base.
    pub fn rated_currents(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dgs.iter().map(|d| d.p_n / self.v_base))
    }

    pub fn references(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dgs.iter().map(|d| d.v_r))
    }

    pub fn validate(&self) -> Result<(), DcmgError> {
        for (i, d) in self.dgs.iter().enumerate() {
            d.validate().map_err(|e| DcmgError::Invalid(format!("DG {i}: {e}")))?;
        }
        for (l, line) in self.lines.iter().enumerate() {
            if !(line.r_l > 0.0 && line.l_l > 0.0 && line.r_l.is_finite() && line.l_l.is_finite()) {
                return Err(DcmgError::Invalid(format!("line {l}: R_l and L_l must be positive")));
            }
            if !(line.sigma_l2 >= 0.0) {
                return Err(DcmgError::Invalid(format!("line {l}: negative variance")));
            }
        }
        self.topology().validate()?;
        if !(self.v_base > 0.0) {
            return Err(DcmgError::Invalid("V_base must be positive".into()));
        }
        let vmax = self.dgs.iter().map(|d| d.v_r).fold(0.0, f64::max);
        if self.v_nom < vmax {
            return Err(DcmgError::Invalid(format!("V_nom {} is below the largest reference {vmax}", self.v_nom)));
        }
        Ok(())
    }

    /// B R^-1 B^T + diag(Y_L).
    pub fn conductance(&self) -> DMatrix<f64> {
        let b = self.bi_adjacency();
        let rinv = DMatrix::from_diagonal(&DVector::from_iterator(
            self.n_lines(),
            self.lines.iter().map(|l| 1.0 / l.r_l),
        ));
        let mut g = &b * rinv * b.transpose();
        for (i, d) in self.dgs.iter().enumerate() {
            g[(i, i)] += d.y_l;
        }
        g
    }
}

/// (A_i, B_i, E_i) of a DG with its voltage integrator.
pub fn dg_state_matrices(dg: &DgParams) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[
            -dg.y_l / dg.c_t, 1.0 / dg.c_t, 0.0,
            -1.0 / dg.l_t, -dg.r_t / dg.l_t, 0.0,
            1.0, 0.0, 0.0,
        ],
    );
    let b = DMatrix::from_column_slice(3, 1, &[0.0, 1.0 / dg.l_t, 0.0]);
    let e = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / dg.c_t, 1.0 / dg.l_t, 1.0]));
    (a, b, e)
}

/// (A_bar, B_bar, E_bar) of an RL line, all 1x1.
pub fn line_state_matrices(line: &LineParams) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_element(1, 1, -line.r_l / line.l_l),
        DMatrix::from_element(1, 1, 1.0 / line.l_l),
        DMatrix::from_element(1, 1, 1.0 / line.l_l),
    )
}

/// DG <- line coupling `C_bar` (3N x L) and line <- DG coupling `C` (L x 3N).
pub fn coupling_matrices(mg: &MicrogridSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, nl) = (mg.n(), mg.n_lines());
    let b = mg.bi_adjacency();
    let mut cbar = DMatrix::zeros(3 * n, nl);
    let mut c = DMatrix::zeros(nl, 3 * n);
    for l in 0..nl {
        for i in 0..n {
            if b[(i, l)] != 0.0 {
                cbar[(3 * i, l)] = -b[(i, l)] / mg.dgs[i].c_t;
                c[(l, 3 * i)] = b[(i, l)];
            }
        }
    }
    (cbar, c)
}

/// Block-diagonal stacking of per-subsystem matrices.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Lift an N x N current-gain matrix into the 3N x 3N block form.
pub fn embed_current_gains(k_i: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k_i.nrows();
    let mut k = DMatrix::zeros(3 * n, 3 * n);
    for i in 0..n {
        for j in 0..n {
            k[(3 * i + 1, 3 * j + 1)] = k_i[(i, j)];
        }
    }
    k
}

/// The N x N matrix of (2,2) entries of a 3N x 3N block gain.
pub fn current_gains(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows() / 3;
    DMatrix::from_fn(n, n, |i, j| k[(3 * i + 1, 3 * j + 1)])
}

/// Checks the block structure of `K` and the weighted-Laplacian rows.
pub fn check_gain_structure(k: &DMatrix<f64>, i_n: &DVector<f64>, tol: f64) -> Result<(), DcmgError> {
    let n = i_n.len();
    if k.nrows() != 3 * n || k.ncols() != 3 * n {
        return Err(DcmgError::Structure(format!(
            "gain is {}x{}, expected {}x{}",
            k.nrows(),
            k.ncols(),
            3 * n,
            3 * n
        )));
    }
    for i in 0..n {
        for j in 0..n {
            for a in 0..3 {
                for b in 0..3 {
                    if (a, b) != (1, 1) && k[(3 * i + a, 3 * j + b)] != 0.0 {
                        return Err(DcmgError::Structure(format!(
                            "block ({i}, {j}) has a nonzero entry at ({a}, {b})"
                        )));
                    }
                }
            }
        }
    }
    let ki = current_gains(k);
    for i in 0..n {
        let terms: Vec<f64> = (0..n).map(|j| ki[(i, j)] * i_n[j]).collect();
        let sum: f64 = terms.iter().sum();
        let scale: f64 = terms.iter().map(|t| t.abs()).sum::<f64>().max(1.0);
        if sum.abs() > tol * scale {
            return Err(DcmgError::Structure(format!(
                "row {i} of the current gains violates the Laplacian condition by {sum:.3e}"
            )));
        }
    }
    Ok(())
}

/// Blocks of the networked error-system interconnection.
#[derive(Debug, Clone, PartialEq)]
pub struct InterconnectionMatrix {
    pub k: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub e_c: DMatrix<f64>,
    pub e_bar_c: DMatrix<f64>,
    pub h_c: DMatrix<f64>,
    pub h_bar_c: DMatrix<f64>,
}

impl InterconnectionMatrix {
    pub fn n_dg_states(&self) -> usize {
        self.k.nrows()
    }

    pub fn n_lines(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_disturbances(&self) -> usize {
        self.e_c.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.h_c.nrows()
    }

    /// The full matrix mapping `[x; x_bar; w_c]` to `[u; u_bar; z_c]`.
    pub fn full(&self) -> DMatrix<f64> {
        let (nx, nl, nw, nz) = (self.n_dg_states(), self.n_lines(), self.n_disturbances(), self.n_outputs());
        let mut m = DMatrix::zeros(nx + nl + nz, nx + nl + nw);
        m.view_mut((0, 0), (nx, nx)).copy_from(&self.k);
        m.view_mut((0, nx), (nx, nl)).copy_from(&self.c_bar);
        m.view_mut((0, nx + nl), (nx, nw)).copy_from(&self.e_c);
        m.view_mut((nx, 0), (nl, nx)).copy_from(&self.c);
        m.view_mut((nx, nx + nl), (nl, nw)).copy_from(&self.e_bar_c);
        m.view_mut((nx + nl, 0), (nz, nx)).copy_from(&self.h_c);
        m.view_mut((nx + nl, nx), (nz, nl)).copy_from(&self.h_bar_c);
        m
    }
}

/// Disturbance and performance blocks shared by analysis and synthesis.
pub(crate) fn network_io(mg: &MicrogridSpec) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (nx, nl) = (3 * mg.n(), mg.n_lines());
    let e = block_diag(&mg.dgs.iter().map(|d| dg_state_matrices(d).2).collect::<Vec<_>>());
    let ebar = block_diag(&mg.lines.iter().map(|l| line_state_matrices(l).2).collect::<Vec<_>>());
    let mut e_c = DMatrix::zeros(nx, nx + nl);
    e_c.view_mut((0, 0), (nx, nx)).copy_from(&e);
    let mut e_bar_c = DMatrix::zeros(nl, nx + nl);
    e_bar_c.view_mut((0, nx), (nl, nl)).copy_from(&ebar);
    let mut h_c = DMatrix::zeros(nx + nl, nx);
    h_c.view_mut((0, 0), (nx, nx)).fill_with_identity();
    let mut h_bar_c = DMatrix::zeros(nx + nl, nl);
    h_bar_c.view_mut((nx, 0), (nl, nl)).fill_with_identity();
    (e_c, e_bar_c, h_c, h_bar_c)
}

pub fn assemble_interconnection(mg: &MicrogridSpec, k: &DMatrix<f64>) -> Result<InterconnectionMatrix, DcmgError> {
    check_gain_structure(k, &mg.rated_currents(), 1e-8)?;
    let (c_bar, c) = coupling_matrices(mg);
    let (e_c, e_bar_c, h_c, h_bar_c) = network_io(mg);
    Ok(InterconnectionMatrix { k: k.clone(), c_bar, c, e_c, e_bar_c, h_c, h_bar_c })
}
