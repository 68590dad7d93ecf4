//! P1 finite elements on triangulations of convex polygons: meshing,
//! variable-coefficient assembly with oscillation-resolving quadrature,
//! Dirichlet solves, and norms.

pub mod cell;
pub mod sparse;

use crate::error::{Error, Result};
use crate::geometry::{mat_apply, PolygonDomain};
use crate::microstructure::{BlockMatrix, PeriodicTensor};
pub use sparse::{pcg, Csr};
use std::collections::BTreeMap;

/// A conforming triangulation. `node_edges[v]` lists the polygon edge lines
/// containing node `v` (empty for interior nodes); `identify[v]` maps each
/// node to its representative degree-of-freedom node (the identity map except
/// for periodic strip meshes, where the seam column is identified with the
/// first column).
#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub node_edges: Vec<Vec<usize>>,
    pub identify: Vec<usize>,
    /// Max element diameter.
    pub h: f64,
    /// Structured grid pitch (general meshes: max element diameter).
    pub pitch: f64,
}

impl Mesh {
    pub fn is_boundary(&self, node: usize) -> bool {
        !self.node_edges[node].is_empty()
    }

    /// Boundary nodes with their owning edge ids.
    pub fn boundary_nodes(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.node_edges
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.is_empty())
            .map(|(v, e)| (v, e.as_slice()))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|v| self.nodes[v]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    }

    /// Gradients of the three barycentric basis functions and the area.
    pub fn p1_gradients(&self, t: usize) -> ([[f64; 2]; 3], f64) {
        let [a, b, c] = self.triangles[t].map(|v| self.nodes[v]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        let g = [
            [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
            [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
            [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
        ];
        (g, 0.5 * det)
    }

    pub fn min_angle_deg(&self) -> f64 {
        let mut worst = f64::INFINITY;
        for t in &self.triangles {
            let v = t.map(|i| self.nodes[i]);
            for k in 0..3 {
                let p = v[k];
                let q = v[(k + 1) % 3];
                let r = v[(k + 2) % 3];
                let u = [q[0] - p[0], q[1] - p[1]];
                let w = [r[0] - p[0], r[1] - p[1]];
                let cross = u[0] * w[1] - u[1] * w[0];
                let dot = u[0] * w[0] + u[1] * w[1];
                worst = worst.min(cross.abs().atan2(dot).to_degrees());
            }
        }
        worst
    }

    fn max_diameter(&self) -> f64 {
        let mut h = 0.0f64;
        for t in &self.triangles {
            let v = t.map(|i| self.nodes[i]);
            for k in 0..3 {
                let a = v[k];
                let b = v[(k + 1) % 3];
                h = h.max(((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt());
            }
        }
        h
    }

    /// Structured right-triangle mesh of an axis-aligned rectangle,
    /// `kx x ky` cells. Boundary edge ids are assigned afterwards by the
    /// caller via [`Mesh::assign_boundary_edges`].
    pub fn structured_rectangle(origin: [f64; 2], size: [f64; 2], kx: usize, ky: usize) -> Self {
        let mut nodes = Vec::with_capacity((kx + 1) * (ky + 1));
        for j in 0..=ky {
            for i in 0..=kx {
                nodes.push([
                    origin[0] + size[0] * i as f64 / kx as f64,
                    origin[1] + size[1] * j as f64 / ky as f64,
                ]);
            }
        }
        let idx = |i: usize, j: usize| j * (kx + 1) + i;
        let mut triangles = Vec::with_capacity(2 * kx * ky);
        for j in 0..ky {
            for i in 0..kx {
                let (n00, n10, n01, n11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                triangles.push([n00, n10, n11]);
                triangles.push([n00, n11, n01]);
            }
        }
        let n = nodes.len();
        let pitch = (size[0] / kx as f64).max(size[1] / ky as f64);
        let mut mesh = Self {
            nodes,
            triangles,
            node_edges: vec![Vec::new(); n],
            identify: (0..n).collect(),
            h: 0.0,
            pitch,
        };
        mesh.h = mesh.max_diameter();
        mesh
    }

    /// Mark boundary nodes by distance to the polygon's edge lines.
    pub fn assign_boundary_edges(&mut self, domain: &PolygonDomain) {
        for (v, p) in self.nodes.iter().enumerate() {
            let mut owners = Vec::new();
            for (k, e) in domain.edges.iter().enumerate() {
                if (e.normal[0] * p[0] + e.normal[1] * p[1] - e.offset).abs() <= 1e-12 {
                    owners.push(k);
                }
            }
            self.node_edges[v] = owners;
        }
    }

    /// Laterally periodic strip mesh on `[0, width] x [0, height]` with
    /// `nx x ny` cells; column `nx` is identified with column `0`. Edge id 0
    /// is the bottom (`z2 = 0`), edge id 1 the top.
    pub fn periodic_strip(width: f64, height: f64, nx: usize, ny: usize) -> Self {
        let mut mesh = Self::structured_rectangle([0.0, 0.0], [width, height], nx, ny);
        let idx = |i: usize, j: usize| j * (nx + 1) + i;
        for j in 0..=ny {
            mesh.identify[idx(nx, j)] = idx(0, j);
        }
        for i in 0..=nx {
            mesh.node_edges[idx(i, 0)].push(0);
            mesh.node_edges[idx(i, ny)].push(1);
        }
        mesh
    }

    /// One uniform quadrisection refinement (angles preserved).
    pub fn quadrisect(&self) -> Self {
        let mut nodes = self.nodes.clone();
        let mut node_edges = self.node_edges.clone();
        let mut midpoints: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut identify = self.identify.clone();
        let mut mid = |a: usize, b: usize, nodes: &mut Vec<[f64; 2]>, node_edges: &mut Vec<Vec<usize>>, identify: &mut Vec<usize>| {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let pa = nodes[a];
                let pb = nodes[b];
                nodes.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                // A midpoint belongs to an edge line iff both endpoints do.
                let shared: Vec<usize> = node_edges[a]
                    .iter()
                    .filter(|e| node_edges[b].contains(e))
                    .cloned()
                    .collect();
                node_edges.push(shared);
                identify.push(nodes.len() - 1);
                nodes.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[a, b, c] in &self.triangles {
            let mab = mid(a, b, &mut nodes, &mut node_edges, &mut identify);
            let mbc = mid(b, c, &mut nodes, &mut node_edges, &mut identify);
            let mca = mid(c, a, &mut nodes, &mut node_edges, &mut identify);
            triangles.push([a, mab, mca]);
            triangles.push([b, mbc, mab]);
            triangles.push([c, mca, mbc]);
            triangles.push([mab, mbc, mca]);
        }
        let mut out = Self {
            nodes,
            triangles,
            node_edges,
            identify,
            h: self.h / 2.0,
            pitch: self.pitch / 2.0,
        };
        out.h = out.max_diameter();
        out
    }
}

/// Default node budget for [`triangulate`].
pub const DEFAULT_NODE_BUDGET: usize = 4_000_000;

/// Triangulate a convex polygon with target grid pitch `h_target`.
///
/// Axis-aligned rectangles get a structured right-triangle grid whose pitch
/// (cell size) is at most `h_target`; general convex polygons are fanned from
/// the Chebyshev center and quadrisected until the maximum element diameter
/// is at most `h_target`. Post-conditions: conforming, positively oriented,
/// minimum angle >= 20 degrees.
pub fn triangulate(domain: &PolygonDomain, h_target: f64, budget: usize) -> Result<Mesh> {
    assert!(h_target > 0.0);
    let mut mesh = if let Some((origin, size)) = axis_aligned_rectangle(domain) {
        let kx = (size[0] / h_target).ceil() as usize;
        let ky = (size[1] / h_target).ceil() as usize;
        let needed = (kx + 1) * (ky + 1);
        if needed > budget {
            return Err(Error::TargetTooFine {
                h_target,
                needed,
                budget,
            });
        }
        Mesh::structured_rectangle(origin, size, kx.max(1), ky.max(1))
    } else {
        let center = domain.chebyshev_center();
        let m = domain.vertices.len();
        let mut nodes = domain.vertices.clone();
        nodes.push(center);
        let triangles: Vec<[usize; 3]> = (0..m).map(|k| [k, (k + 1) % m, m]).collect();
        let n = nodes.len();
        let mut fan = Mesh {
            nodes,
            triangles,
            node_edges: vec![Vec::new(); n],
            identify: (0..n).collect(),
            h: 0.0,
            pitch: 0.0,
        };
        fan.h = fan.max_diameter();
        fan.pitch = fan.h;
        let angle = fan.min_angle_deg();
        if angle < 20.0 {
            return Err(Error::MeshQuality { angle_deg: angle });
        }
        let levels = (fan.h / h_target).log2().ceil().max(0.0) as u32;
        let needed = fan.nodes.len() * 4usize.pow(levels);
        if needed > budget {
            return Err(Error::TargetTooFine {
                h_target,
                needed,
                budget,
            });
        }
        let mut mesh = fan;
        for _ in 0..levels {
            mesh = mesh.quadrisect();
        }
        mesh
    };
    mesh.assign_boundary_edges(domain);
    debug_assert!(mesh.triangles.iter().enumerate().all(|(t, _)| mesh.triangle_area(t) > 0.0));
    Ok(mesh)
}

fn axis_aligned_rectangle(domain: &PolygonDomain) -> Option<([f64; 2], [f64; 2])> {
    if domain.vertices.len() != 4 {
        return None;
    }
    for e in &domain.edges {
        if e.normal[0].abs() > 1e-14 && e.normal[1].abs() > 1e-14 {
            return None;
        }
    }
    let xs: Vec<f64> = domain.vertices.iter().map(|v| v[0]).collect();
    let ys: Vec<f64> = domain.vertices.iter().map(|v| v[1]).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    Some(([x0, y0], [x1 - x0, y1 - y0]))
}

/// Coefficient field seen by the assembler.
pub enum Coefficient<'a> {
    /// Constant block tensor (e.g. `A0`).
    Constant(&'a BlockMatrix),
    /// `A(x / eps)`.
    Oscillating { tensor: &'a PeriodicTensor, eps: f64 },
    /// Rotated strip coefficient `M^T A(M z + offset) M` in fast variables.
    Rotated {
        tensor: &'a PeriodicTensor,
        rotation: [[f64; 2]; 2],
        offset: [f64; 2],
    },
}

impl Coefficient<'_> {
    pub fn ncomp(&self) -> usize {
        match self {
            Self::Constant(b) => b.ncomp(),
            Self::Oscillating { tensor, .. } | Self::Rotated { tensor, .. } => tensor.ncomp(),
        }
    }

    pub fn eval(&self, x: [f64; 2], out: &mut BlockMatrix) {
        match self {
            Self::Constant(b) => out.clone_from(b),
            Self::Oscillating { tensor, eps } => {
                tensor.eval([x[0] / eps, x[1] / eps], out);
            }
            Self::Rotated {
                tensor,
                rotation,
                offset,
            } => {
                let mz = mat_apply(rotation, x);
                let y = [mz[0] + offset[0], mz[1] + offset[1]];
                let a = tensor.eval_block(y);
                let ncomp = a.ncomp();
                // out^{ab}_ij = M_ga A^{gd}_ij M_db
                for alpha in 0..2 {
                    for beta in 0..2 {
                        for i in 0..ncomp {
                            for j in 0..ncomp {
                                let mut acc = 0.0;
                                for g in 0..2 {
                                    for d in 0..2 {
                                        acc += rotation[g][alpha]
                                            * a.entry(g, d, i, j)
                                            * rotation[d][beta];
                                    }
                                }
                                *out.entry_mut(alpha, beta, i, j) = acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Classification of a global degree of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofClass {
    Free(usize),
    Fixed(usize),
    /// Slave of an identified (periodic) node; never carries a dof.
    Slave,
}

/// Assembled stiffness/mass pair with Dirichlet bookkeeping. Rows/columns are
/// split into free and fixed dofs: `kff` acts on free dofs, `kfb` maps fixed
/// (boundary) values into free equations.
pub struct DiscreteSystem {
    pub mesh: Mesh,
    pub ncomp: usize,
    pub kff: Csr,
    pub kfb: Csr,
    pub mff: Csr,
    pub mfb: Csr,
    /// Full stiffness over global dofs (slave rows/columns empty).
    pub kall: Csr,
    /// Full mass over global dofs (slave rows/columns empty).
    pub mall: Csr,
    /// free index -> global dof (`node * ncomp + comp`).
    pub free_dofs: Vec<usize>,
    /// fixed index -> global dof.
    pub fixed_dofs: Vec<usize>,
    /// global dof -> classification.
    pub dof_class: Vec<DofClass>,
    /// Quadrature subdivision level used for the stiffness integrals.
    pub quadrature_subdiv: usize,
}

/// Enumerate the midpoint-composite quadrature of the reference triangle at
/// subdivision level `s`: calls `f(barycentric centroid, weight fraction)`
/// for each of the `4^s` sub-triangles; weights sum to 1.
pub(crate) fn foreach_subtriangle(level: usize, f: &mut impl FnMut([f64; 3], f64)) {
    fn recurse(corners: [[f64; 3]; 3], level: usize, w: f64, f: &mut impl FnMut([f64; 3], f64)) {
        if level == 0 {
            let c = [
                (corners[0][0] + corners[1][0] + corners[2][0]) / 3.0,
                (corners[0][1] + corners[1][1] + corners[2][1]) / 3.0,
                (corners[0][2] + corners[1][2] + corners[2][2]) / 3.0,
            ];
            f(c, w);
            return;
        }
        let mid = |a: [f64; 3], b: [f64; 3]| {
            [
                0.5 * (a[0] + b[0]),
                0.5 * (a[1] + b[1]),
                0.5 * (a[2] + b[2]),
            ]
        };
        let [a, b, c] = corners;
        let (mab, mbc, mca) = (mid(a, b), mid(b, c), mid(c, a));
        recurse([a, mab, mca], level - 1, w / 4.0, f);
        recurse([b, mbc, mab], level - 1, w / 4.0, f);
        recurse([c, mca, mbc], level - 1, w / 4.0, f);
        recurse([mab, mbc, mca], level - 1, w / 4.0, f);
    }
    recurse(
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        level,
        1.0,
        f,
    );
}

/// Assemble stiffness and mass for a coefficient field on a mesh.
///
/// `dirichlet_edges`: polygon edge ids carrying Dirichlet conditions (`None`
/// means the whole boundary). `subdiv` is the quadrature subdivision level
/// (level `s` uses `4^s` midpoint sub-triangles per element).
pub fn assemble(
    mesh: &Mesh,
    coef: &Coefficient,
    subdiv: usize,
    dirichlet_edges: Option<&[usize]>,
) -> DiscreteSystem {
    let ncomp = coef.ncomp();
    let nn = mesh.nodes.len();
    let ndof = nn * ncomp;

    // Classify dofs.
    let mut dof_class = vec![DofClass::Slave; ndof];
    let mut free_dofs = Vec::new();
    let mut fixed_dofs = Vec::new();
    let is_dirichlet_node = |node: usize| -> bool {
        // A representative node is constrained if any node identified with it
        // touches a Dirichlet edge.
        (0..nn).any(|v| {
            mesh.identify[v] == node
                && mesh.node_edges[v].iter().any(|e| match dirichlet_edges {
                    None => true,
                    Some(set) => set.contains(e),
                })
        })
    };
    for node in 0..nn {
        if mesh.identify[node] != node {
            continue;
        }
        let constrained = is_dirichlet_node(node);
        for c in 0..ncomp {
            let dof = node * ncomp + c;
            if constrained {
                dof_class[dof] = DofClass::Fixed(fixed_dofs.len());
                fixed_dofs.push(dof);
            } else {
                dof_class[dof] = DofClass::Free(free_dofs.len());
                free_dofs.push(dof);
            }
        }
    }

    let mut k_ff = Vec::new();
    let mut k_fb = Vec::new();
    let mut m_ff = Vec::new();
    let mut m_fb = Vec::new();
    let mut k_all = Vec::new();
    let mut m_all = Vec::new();
    let mut apoint = BlockMatrix::zeros(ncomp);
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangles[t];
        let (g, area) = mesh.p1_gradients(t);
        let verts = tri.map(|v| mesh.nodes[v]);
        // Element-integrated coefficient.
        let mut abar = BlockMatrix::zeros(ncomp);
        foreach_subtriangle(subdiv, &mut |bary, w| {
            let x = [
                bary[0] * verts[0][0] + bary[1] * verts[1][0] + bary[2] * verts[2][0],
                bary[0] * verts[0][1] + bary[1] * verts[1][1] + bary[2] * verts[2][1],
            ];
            coef.eval(x, &mut apoint);
            for alpha in 0..2 {
                for beta in 0..2 {
                    for i in 0..ncomp {
                        for j in 0..ncomp {
                            *abar.entry_mut(alpha, beta, i, j) +=
                                w * area * apoint.entry(alpha, beta, i, j);
                        }
                    }
                }
            }
        });
        for a in 0..3 {
            for i in 0..ncomp {
                let row = mesh.identify[tri[a]] * ncomp + i;
                for b in 0..3 {
                    let mass = area / 12.0 * if a == b { 2.0 } else { 1.0 };
                    for j in 0..ncomp {
                        let col = mesh.identify[tri[b]] * ncomp + j;
                        let mut ke = 0.0;
                        for alpha in 0..2 {
                            for beta in 0..2 {
                                ke += abar.entry(alpha, beta, i, j) * g[a][alpha] * g[b][beta];
                            }
                        }
                        let me = if i == j { mass } else { 0.0 };
                        k_all.push((row, col, ke));
                        if me != 0.0 {
                            m_all.push((row, col, me));
                        }
                        let DofClass::Free(ri) = dof_class[row] else {
                            continue;
                        };
                        match dof_class[col] {
                            DofClass::Free(ci) => {
                                k_ff.push((ri, ci, ke));
                                if me != 0.0 {
                                    m_ff.push((ri, ci, me));
                                }
                            }
                            DofClass::Fixed(ci) => {
                                k_fb.push((ri, ci, ke));
                                if me != 0.0 {
                                    m_fb.push((ri, ci, me));
                                }
                            }
                            DofClass::Slave => unreachable!("slave dof after identification"),
                        }
                    }
                }
            }
        }
    }
    let nf = free_dofs.len();
    let nb = fixed_dofs.len();
    DiscreteSystem {
        mesh: mesh.clone(),
        ncomp,
        kff: Csr::from_triplets(nf, nf, k_ff),
        kfb: Csr::from_triplets(nf, nb, k_fb),
        mff: Csr::from_triplets(nf, nf, m_ff),
        mfb: Csr::from_triplets(nf, nb, m_fb),
        kall: Csr::from_triplets(ndof, ndof, k_all),
        mall: Csr::from_triplets(ndof, ndof, m_all),
        free_dofs,
        fixed_dofs,
        dof_class,
        quadrature_subdiv: subdiv,
    }
}

/// Pick the quadrature subdivision level so the sub-cell diameter is at most
/// `eps / 4`, capped.
pub fn oscillation_subdiv(h: f64, eps: f64) -> usize {
    let mut level = 0usize;
    let mut d = h;
    while d > eps / 4.0 && level < 6 {
        d /= 2.0;
        level += 1;
    }
    level
}

/// Assemble the oscillating-coefficient system `int A(x/eps) grad . grad`.
///
/// Errors with `QuadratureUnderResolved` when `h > eps` unless
/// `allow_underresolved` is set.
pub fn assemble_oscillating(
    mesh: &Mesh,
    tensor: &PeriodicTensor,
    eps: f64,
    allow_underresolved: bool,
) -> Result<DiscreteSystem> {
    assert!(eps > 0.0);
    if mesh.h > eps && !allow_underresolved {
        return Err(Error::QuadratureUnderResolved { h: mesh.h, eps });
    }
    let subdiv = oscillation_subdiv(mesh.h, eps);
    Ok(assemble(
        mesh,
        &Coefficient::Oscillating { tensor, eps },
        subdiv,
        None,
    ))
}

/// Assemble the constant-coefficient system for `A0`.
pub fn assemble_constant(mesh: &Mesh, a0: &BlockMatrix) -> DiscreteSystem {
    assemble(mesh, &Coefficient::Constant(a0), 0, None)
}

/// Right-hand side of a Dirichlet solve.
pub enum Load<'a> {
    Zero,
    /// `f(x, component)`.
    Fn(&'a dyn Fn([f64; 2], usize) -> f64),
    /// Nodal coefficient vector of `f` in the P1 space (length nodes*ncomp);
    /// the load is `M f`.
    Nodal(&'a [f64]),
}

/// Dirichlet boundary data.
pub enum BoundaryData<'a> {
    Zero,
    /// `g(x, component)`, single-valued across edges.
    Fn(&'a dyn Fn([f64; 2], usize) -> f64),
    /// Per-edge data `g(edge, x, component)`; nodes on several edges
    /// (vertices) take the arithmetic mean of the adjacent edge values.
    PerEdge(&'a dyn Fn(usize, [f64; 2], usize) -> f64),
}

impl BoundaryData<'_> {
    fn value(&self, edges: &[usize], x: [f64; 2], comp: usize) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Fn(f) => f(x, comp),
            Self::PerEdge(f) => {
                let mut acc = 0.0;
                for &e in edges {
                    acc += f(e, x, comp);
                }
                acc / edges.len() as f64
            }
        }
    }
}

/// Solver options for the constrained linear solves.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub rtol: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-11,
            max_iterations: 60_000,
        }
    }
}

impl DiscreteSystem {
    /// Sampled Dirichlet values of `g` on the fixed dofs.
    pub fn boundary_values(&self, g: &BoundaryData) -> Vec<f64> {
        self.fixed_dofs
            .iter()
            .map(|&dof| {
                let node = dof / self.ncomp;
                let comp = dof % self.ncomp;
                // The representative's edge set is the union over identified
                // nodes (relevant only at periodic seams, where both columns
                // carry the same edges).
                g.value(&self.mesh.node_edges[node], self.mesh.nodes[node], comp)
            })
            .collect()
    }

    /// Assemble the free-dof load vector.
    pub fn load_vector(&self, f: &Load) -> Vec<f64> {
        let nf = self.free_dofs.len();
        match f {
            Load::Zero => vec![0.0; nf],
            Load::Nodal(vals) => {
                // M f split over free/fixed columns.
                let mut xf = vec![0.0; nf];
                let mut xb = vec![0.0; self.fixed_dofs.len()];
                for (dof, class) in self.dof_class.iter().enumerate() {
                    match class {
                        DofClass::Free(i) => xf[*i] = vals[dof],
                        DofClass::Fixed(i) => xb[*i] = vals[dof],
                        DofClass::Slave => {}
                    }
                }
                let mut rhs = self.mff.matvec_alloc(&xf);
                let mb = self.mfb.matvec_alloc(&xb);
                for (r, v) in rhs.iter_mut().zip(&mb) {
                    *r += v;
                }
                rhs
            }
            Load::Fn(func) => {
                let mut rhs = vec![0.0; nf];
                for t in 0..self.mesh.triangles.len() {
                    let tri = self.mesh.triangles[t];
                    let verts = tri.map(|v| self.mesh.nodes[v]);
                    let area = self.mesh.triangle_area(t);
                    foreach_subtriangle(self.quadrature_subdiv.max(1), &mut |bary, w| {
                        let x = [
                            bary[0] * verts[0][0] + bary[1] * verts[1][0] + bary[2] * verts[2][0],
                            bary[0] * verts[0][1] + bary[1] * verts[1][1] + bary[2] * verts[2][1],
                        ];
                        for (a, &node) in tri.iter().enumerate() {
                            for c in 0..self.ncomp {
                                let dof = self.mesh.identify[node] * self.ncomp + c;
                                if let DofClass::Free(i) = self.dof_class[dof] {
                                    rhs[i] += w * area * bary[a] * func(x, c);
                                }
                            }
                        }
                    });
                }
                rhs
            }
        }
    }

    /// Solve the constrained system `K u = F` with Dirichlet data `g`;
    /// returns the full nodal field (slave nodes filled from their
    /// representatives).
    pub fn solve_dirichlet(&self, f: &Load, g: &BoundaryData, opts: SolveOptions) -> Result<Vec<f64>> {
        let gb = self.boundary_values(g);
        let mut rhs = self.load_vector(f);
        let kg = self.kfb.matvec_alloc(&gb);
        for (r, v) in rhs.iter_mut().zip(&kg) {
            *r -= v;
        }
        let (uf, out) = pcg(&self.kff, &rhs, None, opts.rtol, opts.max_iterations);
        if !out.converged {
            return Err(Error::SolverFailure {
                context: "dirichlet solve".into(),
                residual: out.residual,
                iterations: out.iterations,
            });
        }
        Ok(self.expand(&uf, &gb))
    }

    /// Scatter split free/fixed vectors into a full nodal field.
    pub fn expand(&self, uf: &[f64], ub: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.mesh.nodes.len() * self.ncomp];
        for (dof, class) in self.dof_class.iter().enumerate() {
            match class {
                DofClass::Free(i) => full[dof] = uf[*i],
                DofClass::Fixed(i) => full[dof] = ub[*i],
                DofClass::Slave => {}
            }
        }
        // Fill slaves from representatives.
        for node in 0..self.mesh.nodes.len() {
            let rep = self.mesh.identify[node];
            if rep != node {
                for c in 0..self.ncomp {
                    full[node * self.ncomp + c] = full[rep * self.ncomp + c];
                }
            }
        }
        full
    }

    /// Restrict a full nodal field to the free/fixed split.
    pub fn restrict(&self, full: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut uf = vec![0.0; self.free_dofs.len()];
        let mut ub = vec![0.0; self.fixed_dofs.len()];
        for (dof, class) in self.dof_class.iter().enumerate() {
            match class {
                DofClass::Free(i) => uf[*i] = full[dof],
                DofClass::Fixed(i) => ub[*i] = full[dof],
                DofClass::Slave => {}
            }
        }
        (uf, ub)
    }

    /// Energy pairing `a(u, w)` for a full nodal `u` and a free test vector
    /// `w` (length = number of free dofs).
    pub fn energy_pairing(&self, u_full: &[f64], w_free: &[f64]) -> f64 {
        let (uf, ub) = self.restrict(u_full);
        let mut ku = self.kff.matvec_alloc(&uf);
        let kb = self.kfb.matvec_alloc(&ub);
        for (a, b) in ku.iter_mut().zip(&kb) {
            *a += b;
        }
        sparse::dot(&ku, w_free)
    }

    /// Project a full nodal field onto representative dofs (zero at slaves),
    /// matching the `kall`/`mall` indexing.
    fn to_rep(&self, u_full: &[f64]) -> Vec<f64> {
        let mut u = u_full.to_vec();
        for (dof, class) in self.dof_class.iter().enumerate() {
            if matches!(class, DofClass::Slave) {
                u[dof] = 0.0;
            }
        }
        u
    }

    /// Energy norm squared `a(u, u)` of a full nodal field, including
    /// boundary-to-boundary contributions.
    pub fn energy(&self, u_full: &[f64]) -> f64 {
        let u = self.to_rep(u_full);
        sparse::dot(&self.kall.matvec_alloc(&u), &u)
    }

    /// Mass (L2) inner product of two full nodal fields.
    pub fn mass_inner(&self, u_full: &[f64], v_full: &[f64]) -> f64 {
        let u = self.to_rep(u_full);
        let v = self.to_rep(v_full);
        sparse::dot(&self.mall.matvec_alloc(&u), &v)
    }
}

/// L2 norm, H1 seminorm and nodal max norm of a P1 field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l2: f64,
    pub h1_semi: f64,
    pub linf: f64,
}

/// Norms of a full nodal field (`ncomp` components per node); quadrature is
/// exact for the P1 field itself.
pub fn norms(field: &[f64], mesh: &Mesh, ncomp: usize) -> Norms {
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangles[t];
        let (g, area) = mesh.p1_gradients(t);
        for c in 0..ncomp {
            let u = tri.map(|v| field[v * ncomp + c]);
            // Exact integral of the squared P1 function.
            l2 += area / 6.0
                * (u[0] * u[0]
                    + u[1] * u[1]
                    + u[2] * u[2]
                    + u[0] * u[1]
                    + u[1] * u[2]
                    + u[2] * u[0]);
            let gx = u[0] * g[0][0] + u[1] * g[1][0] + u[2] * g[2][0];
            let gy = u[0] * g[0][1] + u[1] * g[1][1] + u[2] * g[2][1];
            h1 += area * (gx * gx + gy * gy);
        }
    }
    let linf = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Norms {
        l2: l2.sqrt(),
        h1_semi: h1.sqrt(),
        linf,
    }
}

/// Superconvergent patch recovery: area-weighted average of adjacent element
/// gradients onto nodes. Returns `[node][comp][axis]` flattened as
/// `node * (2 ncomp) + comp * 2 + axis`.
pub fn recover_gradient(field: &[f64], mesh: &Mesh, ncomp: usize) -> Vec<f64> {
    let nn = mesh.nodes.len();
    let mut acc = vec![0.0; nn * 2 * ncomp];
    let mut wsum = vec![0.0; nn];
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangles[t];
        let (g, area) = mesh.p1_gradients(t);
        for c in 0..ncomp {
            let u = tri.map(|v| field[v * ncomp + c]);
            let gx = u[0] * g[0][0] + u[1] * g[1][0] + u[2] * g[2][0];
            let gy = u[0] * g[0][1] + u[1] * g[1][1] + u[2] * g[2][1];
            for &node in &tri {
                let rep = mesh.identify[node];
                acc[rep * 2 * ncomp + c * 2] += area * gx;
                acc[rep * 2 * ncomp + c * 2 + 1] += area * gy;
            }
        }
        for &node in &tri {
            wsum[mesh.identify[node]] += area;
        }
    }
    for node in 0..nn {
        let rep = mesh.identify[node];
        let w = wsum[rep];
        if rep == node && w > 0.0 {
            for k in 0..2 * ncomp {
                acc[node * 2 * ncomp + k] /= w;
            }
        }
    }
    for node in 0..nn {
        let rep = mesh.identify[node];
        if rep != node {
            for k in 0..2 * ncomp {
                acc[node * 2 * ncomp + k] = acc[rep * 2 * ncomp + k];
            }
        }
    }
    acc
}

/// Integrate a function over the mesh with the subdivided midpoint rule;
/// the callback receives the quadrature point, triangle index and barycentric
/// coordinates (for P1 interpolation of discrete fields).
pub fn integrate(mesh: &Mesh, subdiv: usize, f: &mut impl FnMut([f64; 2], usize, [f64; 3]) -> f64) -> f64 {
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangles[t];
        let verts = tri.map(|v| mesh.nodes[v]);
        let area = mesh.triangle_area(t);
        foreach_subtriangle(subdiv, &mut |bary, w| {
            let x = [
                bary[0] * verts[0][0] + bary[1] * verts[1][0] + bary[2] * verts[2][0],
                bary[0] * verts[0][1] + bary[1] * verts[1][1] + bary[2] * verts[2][1],
            ];
            acc += w * area * f(x, t, bary);
        });
    }
    acc
}

/// P1 interpolation of a nodal field at barycentric coordinates of a
/// triangle.
pub fn p1_value(field: &[f64], mesh: &Mesh, ncomp: usize, tri: usize, bary: [f64; 3], comp: usize) -> f64 {
    let t = mesh.triangles[tri];
    bary[0] * field[t[0] * ncomp + comp]
        + bary[1] * field[t[1] * ncomp + comp]
        + bary[2] * field[t[2] * ncomp + comp]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_polygon;
    use crate::microstructure::{BlockMatrix, PeriodicTensor, Preset};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn unit_square() -> PolygonDomain {
        build_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn structured_square_has_nine_nodes_at_half() {
        let mesh = triangulate(&unit_square(), 0.5, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(mesh.nodes.len(), 9);
        assert_eq!(mesh.triangles.len(), 8);
        assert!(mesh.pitch <= 0.5);
    }

    #[test]
    fn fine_square_respects_pitch_target() {
        let mesh = triangulate(&unit_square(), 1.0 / 64.0, DEFAULT_NODE_BUDGET).unwrap();
        assert!(mesh.pitch <= 1.0 / 64.0 + 1e-15);
        assert!(mesh.min_angle_deg() >= 20.0);
    }

    #[test]
    fn triangle_domain_boundary_nodes_on_edge_lines() {
        let tri = build_polygon(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mesh = triangulate(&tri, 0.25, DEFAULT_NODE_BUDGET).unwrap();
        assert!(mesh.min_angle_deg() >= 20.0);
        for (node, edges) in mesh.boundary_nodes() {
            let p = mesh.nodes[node];
            for &e in edges {
                let ed = &tri.edges[e];
                let d = ed.normal[0] * p[0] + ed.normal[1] * p[1] - ed.offset;
                assert!(d.abs() <= 1e-12, "node {node} off edge {e}: {d}");
            }
        }
    }

    #[test]
    fn conforming_interior_edges() {
        let mesh = triangulate(&unit_square(), 0.25, DEFAULT_NODE_BUDGET).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let a = t[k].min(t[(k + 1) % 3]);
                let b = t[k].max(t[(k + 1) % 3]);
                *counts.entry((a, b)).or_insert(0usize) += 1;
            }
        }
        for (&(a, b), &c) in &counts {
            let boundary_edge = !mesh.node_edges[a].is_empty()
                && mesh.node_edges[a].iter().any(|e| mesh.node_edges[b].contains(e));
            assert!(
                c == 2 || (c == 1 && boundary_edge),
                "edge ({a},{b}) shared by {c} triangles"
            );
        }
    }

    #[test]
    fn identity_assembly_equals_constant_laplacian() {
        let mesh = triangulate(&unit_square(), 0.25, DEFAULT_NODE_BUDGET).unwrap();
        let id_tensor = PeriodicTensor::preset(Preset::Identity { ncomp: 1 });
        let osc = assemble_oscillating(&mesh, &id_tensor, 0.5, false).unwrap();
        let id = BlockMatrix::identity(1);
        let con = assemble_constant(&mesh, &id);
        let d = osc.kff.to_dense() - con.kff.to_dense();
        assert!(d.amax() <= 1e-12);
    }

    #[test]
    fn energy_of_linear_probe_is_domain_area() {
        let mesh = triangulate(&unit_square(), 0.125, DEFAULT_NODE_BUDGET).unwrap();
        let id = BlockMatrix::identity(1);
        let sys = assemble_constant(&mesh, &id);
        let u: Vec<f64> = mesh.nodes.iter().map(|p| p[0]).collect();
        assert_abs_diff_eq!(sys.energy(&u), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn laminate_energy_scales_by_homogenized_entry() {
        let mesh = triangulate(&unit_square(), 0.125, DEFAULT_NODE_BUDGET).unwrap();
        let mut a0 = BlockMatrix::zeros(1);
        *a0.entry_mut(0, 0, 0, 0) = 3.0f64.sqrt();
        *a0.entry_mut(1, 1, 0, 0) = 2.0;
        let sys = assemble_constant(&mesh, &a0);
        let u: Vec<f64> = mesh.nodes.iter().map(|p| p[0]).collect();
        assert_abs_diff_eq!(sys.energy(&u), 3.0f64.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn manufactured_solution_converges_at_order_two() {
        let exact = |x: [f64; 2]| (PI * x[0]).sin() * (PI * x[1]).sin();
        let f = move |x: [f64; 2], _c: usize| 2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin();
        let id = BlockMatrix::identity(1);
        let mut errors = Vec::new();
        for k in [8usize, 16, 32] {
            let mesh = triangulate(&unit_square(), 1.0 / k as f64, DEFAULT_NODE_BUDGET).unwrap();
            let sys = assemble_constant(&mesh, &id);
            let u = sys
                .solve_dirichlet(&Load::Fn(&f), &BoundaryData::Zero, SolveOptions::default())
                .unwrap();
            let diff: Vec<f64> = mesh
                .nodes
                .iter()
                .zip(&u)
                .map(|(p, v)| v - exact(*p))
                .collect();
            errors.push(norms(&diff, &mesh, 1).l2);
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (3.4..=4.6).contains(&ratio),
                "refinement ratio {ratio} outside order-2 band ({errors:?})"
            );
        }
    }

    #[test]
    fn affine_boundary_data_reproduced_exactly() {
        let mesh = triangulate(&unit_square(), 0.25, DEFAULT_NODE_BUDGET).unwrap();
        let id = BlockMatrix::identity(1);
        let sys = assemble_constant(&mesh, &id);
        let affine = |x: [f64; 2], _c: usize| 2.0 * x[0] - 3.0 * x[1] + 0.5;
        let u = sys
            .solve_dirichlet(&Load::Zero, &BoundaryData::Fn(&affine), SolveOptions::default())
            .unwrap();
        for (p, v) in mesh.nodes.iter().zip(&u) {
            assert_abs_diff_eq!(*v, affine(*p, 0), epsilon = 1e-10);
        }
    }

    #[test]
    fn galerkin_orthogonality() {
        let mesh = triangulate(&unit_square(), 0.25, DEFAULT_NODE_BUDGET).unwrap();
        let id = BlockMatrix::identity(1);
        let sys = assemble_constant(&mesh, &id);
        let f = |_: [f64; 2], _: usize| 1.0;
        let u = sys
            .solve_dirichlet(&Load::Fn(&f), &BoundaryData::Zero, SolveOptions::default())
            .unwrap();
        let rhs = sys.load_vector(&Load::Fn(&f));
        // Probe with a deterministic pseudo-random test vector.
        let w: Vec<f64> = (0..sys.free_dofs.len())
            .map(|i| ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5)
            .collect();
        let a_uw = sys.energy_pairing(&u, &w);
        let f_w = sparse::dot(&rhs, &w);
        let wn = sparse::norm(&w);
        assert!((a_uw - f_w).abs() <= 1e-9 * wn.max(1.0));
    }

    #[test]
    fn norms_of_simple_fields() {
        let mesh = triangulate(&unit_square(), 1.0 / 64.0, DEFAULT_NODE_BUDGET).unwrap();
        let c = vec![3.0; mesh.nodes.len()];
        let n = norms(&c, &mesh, 1);
        assert_abs_diff_eq!(n.l2, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.h1_semi, 0.0, epsilon = 1e-12);
        let x1: Vec<f64> = mesh.nodes.iter().map(|p| p[0]).collect();
        let n = norms(&x1, &mesh, 1);
        assert_abs_diff_eq!(n.h1_semi, 1.0, epsilon = 1e-12);
        let s: Vec<f64> = mesh
            .nodes
            .iter()
            .map(|p| (PI * p[0]).sin() * (PI * p[1]).sin())
            .collect();
        let n = norms(&s, &mesh, 1);
        assert_abs_diff_eq!(n.l2, 0.5, epsilon = 1e-3);
    }

    #[test]
    fn frozen_oscillation_matches_constant_assembly() {
        // eps -> infinity freezes the coefficient at A(0).
        let mesh = triangulate(&unit_square(), 0.25, DEFAULT_NODE_BUDGET).unwrap();
        let lam = PeriodicTensor::preset(Preset::Laminate);
        let osc = assemble_oscillating(&mesh, &lam, 1e12, false).unwrap();
        let a0 = lam.eval_block([0.0, 0.0]);
        let con = assemble_constant(&mesh, &a0);
        let d = osc.kff.to_dense() - con.kff.to_dense();
        assert!(d.amax() <= 1e-9);
    }

    #[test]
    fn periodic_strip_identifies_seam() {
        let mesh = Mesh::periodic_strip(1.0, 2.0, 4, 8);
        let sys = assemble_constant_strip_laplacian(&mesh);
        // Free dofs: interior rows (j = 1..8) x 4 periodic columns, plus the
        // top Neumann row is free too when only edge 0 is Dirichlet.
        assert_eq!(sys.free_dofs.len(), 4 * 8);
        // Constant extension of constant bottom data.
        let g = |_: usize, _: [f64; 2], _: usize| 2.5;
        let u = sys
            .solve_dirichlet(&Load::Zero, &BoundaryData::PerEdge(&g), SolveOptions::default())
            .unwrap();
        for v in &u {
            assert_abs_diff_eq!(*v, 2.5, epsilon = 1e-10);
        }
    }

    fn assemble_constant_strip_laplacian(mesh: &Mesh) -> DiscreteSystem {
        let id = BlockMatrix::identity(1);
        assemble(mesh, &Coefficient::Constant(&id), 0, Some(&[0]))
    }
}
