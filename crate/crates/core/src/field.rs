//! Uniform state grids, multilinear interpolation, tabulated value and policy
//! fields, and sublevel sets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clf::QuadraticCLF;
use crate::error::{invalid, Error, Result};
use crate::systems::{Control, State};

/// Snap distance, in index units, under which a coordinate counts as a node.
const NODE_SNAP: f64 = 1e-10;

/// Axis-aligned box sampled at `counts[d]` equispaced nodes per dimension.
///
/// Nodes are stored row-major: the last dimension varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    counts: Vec<usize>,
    #[serde(skip)]
    strides: Vec<usize>,
}

/// Corner indices and multilinear weights of the cell containing a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub nodes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl UniformGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.len() != counts.len() {
            return Err(invalid("grid", "lo, hi and counts must share a positive length"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(invalid("grid", "lo < hi must hold componentwise"));
        }
        if counts.iter().any(|&c| c < 2) {
            return Err(invalid("grid", "every dimension needs at least 2 nodes"));
        }
        let mut strides = vec![1; counts.len()];
        for d in (0..counts.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * counts[d + 1];
        }
        Ok(Self {
            lo,
            hi,
            counts,
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn spacing(&self, d: usize) -> f64 {
        (self.hi[d] - self.lo[d]) / (self.counts[d] - 1) as f64
    }

    /// Node coordinate `lo + i·(hi − lo)/(counts − 1)`.
    pub fn coord(&self, d: usize, i: usize) -> f64 {
        self.lo[d] + i as f64 * (self.hi[d] - self.lo[d]) / (self.counts[d] - 1) as f64
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.counts)
            .map(|(s, c)| (flat / s) % c)
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn node(&self, flat: usize) -> State {
        let idx = self.multi_index(flat);
        State::from_iterator(self.dim(), idx.iter().enumerate().map(|(d, &i)| self.coord(d, i)))
    }

    pub fn nodes(&self) -> impl Iterator<Item = State> + '_ {
        (0..self.len()).map(move |i| self.node(i))
    }

    /// Node lies on the outermost layer of the grid.
    pub fn is_boundary(&self, flat: usize) -> bool {
        self.multi_index(flat)
            .iter()
            .zip(&self.counts)
            .any(|(&i, &c)| i == 0 || i + 1 == c)
    }

    pub fn contains(&self, x: &State) -> bool {
        x.iter()
            .enumerate()
            .all(|(d, &v)| v >= self.lo[d] && v <= self.hi[d])
    }

    pub fn clamp(&self, x: &State) -> State {
        State::from_iterator(
            self.dim(),
            x.iter()
                .enumerate()
                .map(|(d, &v)| v.clamp(self.lo[d], self.hi[d])),
        )
    }

    fn index_coord(&self, d: usize, v: f64) -> f64 {
        let t = (v.clamp(self.lo[d], self.hi[d]) - self.lo[d]) / self.spacing(d);
        let r = t.round();
        if (t - r).abs() < NODE_SNAP {
            r
        } else {
            t
        }
    }

    pub fn nearest_node(&self, x: &State) -> usize {
        let idx: Vec<usize> = (0..self.dim())
            .map(|d| {
                let t = self.index_coord(d, x[d]).round() as usize;
                t.min(self.counts[d] - 1)
            })
            .collect();
        self.flat_index(&idx)
    }

    /// Cell stencil of `x` after clamping it to the box.
    pub fn stencil(&self, x: &State) -> Stencil {
        let corners = 1usize << self.dim();
        let mut nodes = vec![0; corners];
        let mut weights = vec![0.0; corners];
        self.fill_stencil(x, &mut nodes, &mut weights);
        Stencil { nodes, weights }
    }

    /// Writes the `2^dim` corner indices and weights of `x`'s cell.
    pub fn fill_stencil(&self, x: &State, nodes: &mut [usize], weights: &mut [f64]) {
        let dim = self.dim();
        let mut base = [0usize; 16];
        let mut frac = [0f64; 16];
        assert!(dim <= 16, "grids above 16 dimensions are unsupported");
        for d in 0..dim {
            let t = self.index_coord(d, x[d]);
            let i0 = (t.floor() as usize).min(self.counts[d] - 2);
            base[d] = i0;
            frac[d] = t - i0 as f64;
        }
        for mask in 0..(1usize << dim) {
            let mut flat = 0;
            let mut w = 1.0;
            for d in 0..dim {
                let bit = (mask >> (dim - 1 - d)) & 1;
                flat += (base[d] + bit) * self.strides[d];
                w *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
            }
            nodes[mask] = flat;
            weights[mask] = w;
        }
    }

    /// Multilinear interpolation of nodal `values` at `x` (clamped to the box).
    pub fn interpolate_values(&self, values: &[f64], x: &State) -> f64 {
        let st = self.stencil(x);
        st.nodes
            .iter()
            .zip(&st.weights)
            .map(|(&n, &w)| if w == 0.0 { 0.0 } else { w * values[n] })
            .sum()
    }
}

/// Nodal samples of a value function.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: UniformGrid,
    pub values: Vec<f64>,
}

impl ValueField {
    pub fn new(grid: UniformGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension {
                context: "value field",
                expected: grid.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("values", "must be finite and nonnegative"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: UniformGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn interpolate(&self, x: &State) -> f64 {
        self.grid.interpolate_values(&self.values, x)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the node nearest the origin.
    pub fn origin_node(&self) -> usize {
        self.grid
            .nearest_node(&State::zeros(self.grid.dim()))
    }
}

/// Off-node evaluation of a value field as `V(x)·r(x)`, where `r` is the
/// multilinear interpolant of the nodal ratios `J/V`.
///
/// Agrees with the field at every node. Near the origin, where `J` behaves
/// like a quadratic form, this keeps the quadratic shape that plain
/// multilinear interpolation flattens into a cone at grid scale. The ratio at
/// nodes with `V = 0` is the mean of the axis-neighbour ratios.
#[derive(Debug, Clone)]
pub struct ClfScaledValue {
    field: ValueField,
    ratios: Vec<f64>,
    clf: QuadraticCLF,
}

impl ClfScaledValue {
    pub fn new(field: ValueField, clf: &QuadraticCLF) -> Self {
        let grid = &field.grid;
        let vs: Vec<f64> = grid.nodes().map(|x| clf.value(&x)).collect();
        let mut ratios: Vec<f64> = field
            .values
            .iter()
            .zip(&vs)
            .map(|(&j, &v)| if v > 0.0 { j / v } else { f64::NAN })
            .collect();
        for i in 0..ratios.len() {
            if ratios[i].is_nan() {
                let idx = grid.multi_index(i);
                let mut acc = 0.0;
                let mut n = 0usize;
                for d in 0..grid.dim() {
                    for step in [-1i64, 1] {
                        let j = idx[d] as i64 + step;
                        if j >= 0 && (j as usize) < grid.counts()[d] {
                            let mut nb = idx.clone();
                            nb[d] = j as usize;
                            let r = field.values[grid.flat_index(&nb)] / vs[grid.flat_index(&nb)];
                            if r.is_finite() {
                                acc += r;
                                n += 1;
                            }
                        }
                    }
                }
                ratios[i] = if n > 0 { acc / n as f64 } else { 0.0 };
            }
        }
        Self {
            field,
            ratios,
            clf: clf.clone(),
        }
    }

    pub fn field(&self) -> &ValueField {
        &self.field
    }

    pub fn evaluate(&self, x: &State) -> f64 {
        let xc = self.field.grid.clamp(x);
        self.clf.value(&xc) * self.field.grid.interpolate_values(&self.ratios, &xc)
    }
}

/// Nodal controls of a tabulated policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    pub grid: UniformGrid,
    pub controls: Vec<Control>,
}

impl PolicyField {
    /// Control stored at the node nearest `x`.
    pub fn nearest(&self, x: &State) -> Control {
        self.controls[self.grid.nearest_node(x)].clone()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.first().map_or(0, |u| u.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    /// `S_d = {J ≤ d}`
    ValueSet,
    /// `Ω_c = {V ≤ c}`
    ClfSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SublevelSet {
    pub threshold: f64,
    pub kind: SetKind,
    pub members: Vec<bool>,
    /// Some member lies on the outermost grid layer.
    pub touches_boundary: bool,
}

impl SublevelSet {
    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    /// Members not on the outermost grid layer.
    pub fn interior_indices<'a>(&'a self, grid: &'a UniformGrid) -> impl Iterator<Item = usize> + 'a {
        self.indices().filter(move |&i| !grid.is_boundary(i))
    }

    /// Keeps only nodes that are members of both sets.
    pub fn intersect(&self, other: &SublevelSet) -> SublevelSet {
        SublevelSet {
            threshold: self.threshold,
            kind: self.kind,
            members: self
                .members
                .iter()
                .zip(&other.members)
                .map(|(&a, &b)| a && b)
                .collect(),
            touches_boundary: self.touches_boundary && other.touches_boundary,
        }
    }
}

/// Marks nodes whose value is at most `threshold`.
pub fn extract_sublevel(
    values: &[f64],
    threshold: f64,
    grid: &UniformGrid,
    kind: SetKind,
) -> Result<SublevelSet> {
    if !(threshold > 0.0) {
        return Err(invalid("threshold", "must be positive"));
    }
    if values.len() != grid.len() {
        return Err(Error::Dimension {
            context: "sublevel values",
            expected: grid.len(),
            actual: values.len(),
        });
    }
    let members: Vec<bool> = values.iter().map(|&v| v <= threshold).collect();
    let touches_boundary = members
        .iter()
        .enumerate()
        .any(|(i, &m)| m && grid.is_boundary(i));
    Ok(SublevelSet {
        threshold,
        kind,
        members,
        touches_boundary,
    })
}

/// `S_d` of a tabulated value function.
pub fn value_sublevel(field: &ValueField, d: f64) -> Result<SublevelSet> {
    extract_sublevel(&field.values, d, &field.grid, SetKind::ValueSet)
}

/// `Ω_c` of a CLF sampled on `grid`.
pub fn clf_sublevel(clf: &QuadraticCLF, grid: &UniformGrid, c: f64) -> Result<SublevelSet> {
    let vs = clf_nodal_values(clf, grid);
    extract_sublevel(&vs, c, grid, SetKind::ClfSet)
}

pub fn clf_nodal_values(clf: &QuadraticCLF, grid: &UniformGrid) -> Vec<f64> {
    grid.nodes().map(|x| clf.value(&x)).collect()
}

/// Largest grid-verified `c` with `{V ≤ c} ⊆ {J ≤ d}` on the nodes.
pub fn largest_omega_c_inside(field: &ValueField, clf: &QuadraticCLF, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(invalid("d", "must be positive"));
    }
    let vs = clf_nodal_values(clf, &field.grid);
    let blocking = field
        .values
        .iter()
        .zip(&vs)
        .filter(|(&j, _)| j > d)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    if blocking.is_infinite() {
        Ok(vs.iter().copied().fold(0.0, f64::max))
    } else {
        Ok(blocking.next_down())
    }
}

/// Largest value threshold whose sublevel set avoids the outermost grid layer.
pub fn largest_interior_value_level(field: &ValueField) -> f64 {
    let grid = &field.grid;
    (0..grid.len())
        .filter(|&i| grid.is_boundary(i))
        .map(|i| field.values[i])
        .fold(f64::INFINITY, f64::min)
        .next_down()
}

fn write_header(out: &mut String, grid: &UniformGrid, columns: &[String]) {
    let join = |xs: Vec<String>| xs.join(",");
    let _ = writeln!(
        out,
        "dim_counts,{}",
        join(grid.counts().iter().map(|c| c.to_string()).collect())
    );
    let _ = writeln!(out, "lo,{}", join(grid.lo().iter().map(|v| v.to_string()).collect()));
    let _ = writeln!(out, "hi,{}", join(grid.hi().iter().map(|v| v.to_string()).collect()));
    let mut cols = vec!["index".to_string()];
    cols.extend((0..grid.dim()).map(|d| format!("x{d}")));
    cols.extend(columns.iter().cloned());
    let _ = writeln!(out, "{}", cols.join(","));
}

fn write_rows(out: &mut String, grid: &UniformGrid, row: impl Fn(usize) -> Vec<f64>) {
    for i in 0..grid.len() {
        let x = grid.node(i);
        let mut cells = vec![i.to_string()];
        cells.extend(x.iter().map(|v| v.to_string()));
        cells.extend(row(i).iter().map(|v| v.to_string()));
        let _ = writeln!(out, "{}", cells.join(","));
    }
}

impl ValueField {
    /// CSV: `dim_counts`, `lo`, `hi` header lines, a column header, then one
    /// `index, x..., value` row per node.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        write_header(&mut out, &self.grid, &["value".to_string()]);
        write_rows(&mut out, &self.grid, |i| vec![self.values[i]]);
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (grid, rows) = parse_field_csv(text, 1)?;
        let values = rows.into_iter().map(|r| r[0]).collect();
        ValueField::new(grid, values)
    }
}

impl PolicyField {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let cols: Vec<String> = (0..self.control_dim()).map(|k| format!("u{k}")).collect();
        write_header(&mut out, &self.grid, &cols);
        write_rows(&mut out, &self.grid, |i| self.controls[i].iter().copied().collect());
        out
    }

    pub fn from_csv(text: &str, control_dim: usize) -> Result<Self> {
        let (grid, rows) = parse_field_csv(text, control_dim)?;
        let controls = rows.into_iter().map(Control::from_vec).collect();
        Ok(PolicyField { grid, controls })
    }
}

fn parse_field_csv(text: &str, payload: usize) -> Result<(UniformGrid, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut header = |key: &str| -> Result<Vec<String>> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing `{key}` line")))?;
        let mut cells = line.split(',').map(|c| c.trim().to_string());
        if cells.next().as_deref() != Some(key) {
            return Err(Error::Parse(format!("expected `{key}` line, got `{line}`")));
        }
        Ok(cells.collect())
    };
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Parse(format!("not a number: `{s}`")))
    };
    let counts = header("dim_counts")?
        .iter()
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad count `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let lo = header("lo")?.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
    let hi = header("hi")?.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
    let grid = UniformGrid::new(lo, hi, counts).map_err(|e| Error::Parse(e.to_string()))?;
    let _ = header("index")?;
    let dim = grid.dim();
    let mut rows = vec![Vec::new(); grid.len()];
    let mut seen = 0usize;
    for line in lines {
        let cells: Vec<&str> = line.split(',').map(|c| c.trim()).collect();
        if cells.len() != 1 + dim + payload {
            return Err(Error::Parse(format!("row has {} cells: `{line}`", cells.len())));
        }
        let idx: usize = cells[0]
            .parse()
            .map_err(|_| Error::Parse(format!("bad index `{}`", cells[0])))?;
        if idx >= grid.len() {
            return Err(Error::Parse(format!("index {idx} out of range")));
        }
        rows[idx] = cells[1 + dim..]
            .iter()
            .map(|s| num(s))
            .collect::<Result<Vec<_>>>()?;
        seen += 1;
    }
    if seen != grid.len() || rows.iter().any(|r| r.is_empty()) {
        return Err(Error::Parse(format!(
            "expected {} rows, found {seen}",
            grid.len()
        )));
    }
    Ok((grid, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clf::ClfKind;
    use nalgebra::DMatrix;

    fn grid2() -> UniformGrid {
        UniformGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![11, 11]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(UniformGrid::new(vec![0.0], vec![0.0], vec![3]).is_err());
        assert!(UniformGrid::new(vec![0.0], vec![1.0], vec![1]).is_err());
        assert!(UniformGrid::new(vec![0.0, 0.0], vec![1.0], vec![3, 3]).is_err());
    }

    #[test]
    fn node_coordinates_follow_formula() {
        let g = grid2();
        assert_eq!(g.len(), 121);
        for i in 0..g.len() {
            let idx = g.multi_index(i);
            assert_eq!(g.flat_index(&idx), i);
            let x = g.node(i);
            for d in 0..2 {
                assert_eq!(x[d], -2.0 + idx[d] as f64 * 4.0 / 10.0);
            }
        }
        assert_eq!(g.node(1)[1], g.coord(1, 1));
        assert_eq!(g.node(11)[0], g.coord(0, 1));
    }

    #[test]
    fn interpolation_examples() {
        let g1 = UniformGrid::new(vec![0.0], vec![1.0], vec![2]).unwrap();
        let f = ValueField::new(g1, vec![0.0, 1.0]).unwrap();
        assert_eq!(f.interpolate(&State::from_element(1, 0.5)), 0.5);
        assert_eq!(f.interpolate(&State::from_element(1, 3.0)), 1.0);
        assert_eq!(f.interpolate(&State::from_element(1, -3.0)), 0.0);

        let g = grid2();
        let values: Vec<f64> = (0..g.len()).map(|i| (i * 7 % 13) as f64).collect();
        let f = ValueField::new(g.clone(), values.clone()).unwrap();
        for i in 0..g.len() {
            assert_eq!(f.interpolate(&g.node(i)), values[i]);
        }
    }

    #[test]
    fn sublevel_examples() {
        let g = grid2();
        let clf = QuadraticCLF::from_parts(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            0.1,
            ClfKind::Continuous,
        )
        .unwrap();
        let vs = clf_nodal_values(&clf, &g);
        let empty = extract_sublevel(&vs, 1e-9, &g, SetKind::ClfSet).unwrap();
        assert_eq!(empty.count(), 1);
        assert!(empty.members[g.nearest_node(&State::zeros(2))]);
        let all = extract_sublevel(&vs, f64::INFINITY, &g, SetKind::ClfSet).unwrap();
        assert_eq!(all.count(), g.len());
        assert!(all.touches_boundary);
        let omega = clf_sublevel(&clf, &g, 2.0).unwrap();
        for i in 0..g.len() {
            let mirrored = g.nearest_node(&(-g.node(i)));
            assert_eq!(omega.members[i], omega.members[mirrored]);
        }
        assert!(extract_sublevel(&vs, 0.0, &g, SetKind::ClfSet).is_err());
    }

    #[test]
    fn largest_omega_examples() {
        let g = grid2();
        let clf = QuadraticCLF::from_parts(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            0.1,
            ClfKind::Continuous,
        )
        .unwrap();
        let zero = ValueField::zeros(g.clone());
        assert_eq!(largest_omega_c_inside(&zero, &clf, 1.0).unwrap(), 8.0);

        let mut values = vec![0.0; g.len()];
        // node (2, 1.2)
        let blocker = g.flat_index(&[10, 8]);
        assert!((clf.value(&g.node(blocker)) - (4.0 + 1.2 * 1.2)).abs() < 1e-12);
        values[blocker] = 10.0;
        let f = ValueField::new(g.clone(), values).unwrap();
        let c = largest_omega_c_inside(&f, &clf, 1.0).unwrap();
        assert!(c < clf.value(&g.node(blocker)));
        assert!(c > clf.value(&g.node(blocker)) * (1.0 - 1e-12));
    }

    #[test]
    fn csv_round_trip() {
        let g = UniformGrid::new(vec![-1.0, 0.0], vec![1.0, 0.3], vec![3, 4]).unwrap();
        let values: Vec<f64> = (0..g.len()).map(|i| 0.1 * i as f64 + 1.0 / 3.0).collect();
        let f = ValueField::new(g.clone(), values).unwrap();
        let text = f.to_csv();
        assert!(text.starts_with("dim_counts,3,4\nlo,-1,0\nhi,1,0.3\nindex,x0,x1,value\n"));
        assert_eq!(ValueField::from_csv(&text).unwrap(), f);

        let p = PolicyField {
            grid: g.clone(),
            controls: (0..g.len()).map(|i| Control::from_element(1, i as f64 - 2.5)).collect(),
        };
        assert_eq!(PolicyField::from_csv(&p.to_csv(), 1).unwrap(), p);
        assert!(ValueField::from_csv("lo,1\n").is_err());
    }

    #[test]
    fn clf_scaled_value_matches_nodes() {
        let g = grid2();
        let clf = QuadraticCLF::from_parts(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            0.1,
            ClfKind::Continuous,
        )
        .unwrap();
        let values: Vec<f64> = g.nodes().map(|x| 3.0 * clf.value(&x)).collect();
        let f = ValueField::new(g.clone(), values.clone()).unwrap();
        let scaled = ClfScaledValue::new(f, &clf);
        for i in 0..g.len() {
            assert!((scaled.evaluate(&g.node(i)) - values[i]).abs() <= 1e-12 * (1.0 + values[i]));
        }
        // A field proportional to V is reproduced everywhere.
        let x = State::from_vec(vec![0.013, -0.021]);
        assert!((scaled.evaluate(&x) - 3.0 * clf.value(&x)).abs() < 1e-15);
    }
}
