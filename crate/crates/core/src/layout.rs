//! SZ-grouped storage for batches of lines along one Cartesian direction.
//!
//! Lines along the solve direction are bundled `sz` at a time. Inside a group
//! the lanes are interleaved so that position `j` of all `sz` lines occupies
//! `sz` consecutive slots: lane `l`, position `j`, group `g` lives at
//! `l + sz * (j + n * g)`. Sweeps over `j` then stream through memory
//! linearly while the inner lane loop vectorises.
//!
//! Transverse coordinates are enumerated with the faster Cartesian axis
//! first: `(j, k)` with `j` fastest for X lines, `(i, k)` for Y lines and
//! `(i, j)` for Z lines.

use rayon::prelude::*;

use crate::error::{Result, TdsError};

/// Default group width, one AVX-512 register of f64.
pub const DEFAULT_SZ: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    X,
    Y,
    Z,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::X, Direction::Y, Direction::Z];

    pub fn axis(self) -> usize {
        match self {
            Direction::X => 0,
            Direction::Y => 1,
            Direction::Z => 2,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Direction::X => "x",
            Direction::Y => "y",
            Direction::Z => "z",
        };
        f.write_str(s)
    }
}

/// Location of one grid point in the grouped layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PackedIndex {
    pub lane: usize,
    pub position: usize,
    pub group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutDescriptor {
    nx: usize,
    ny: usize,
    nz: usize,
    sz: usize,
    direction: Direction,
    padded: bool,
}

impl LayoutDescriptor {
    /// Strict layout: the transverse line count must be a multiple of `sz`.
    pub fn new(nx: usize, ny: usize, nz: usize, sz: usize, direction: Direction) -> Result<Self> {
        Self::build(nx, ny, nz, sz, direction, false)
    }

    /// Layout whose last group is completed with zero ghost lines.
    pub fn padded(
        nx: usize,
        ny: usize,
        nz: usize,
        sz: usize,
        direction: Direction,
    ) -> Result<Self> {
        Self::build(nx, ny, nz, sz, direction, true)
    }

    fn build(
        nx: usize,
        ny: usize,
        nz: usize,
        sz: usize,
        direction: Direction,
        padded: bool,
    ) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(TdsError::Config(format!(
                "extents must be positive, got ({nx}, {ny}, {nz})"
            )));
        }
        if sz == 0 {
            return Err(TdsError::Config("sz must be >= 1".into()));
        }
        let layout = Self {
            nx,
            ny,
            nz,
            sz,
            direction,
            padded,
        };
        let transverse = layout.transverse();
        if !padded && !transverse.is_multiple_of(sz) {
            return Err(TdsError::Divisibility { transverse, sz });
        }
        Ok(layout)
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn sz(&self) -> usize {
        self.sz
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn is_padded(&self) -> bool {
        self.padded
    }

    /// Extent along the line direction.
    pub fn n(&self) -> usize {
        self.extents()[self.direction.axis()]
    }

    /// Number of lines, i.e. the product of the two transverse extents.
    pub fn transverse(&self) -> usize {
        self.points() / self.n()
    }

    pub fn n_groups(&self) -> usize {
        self.transverse().div_ceil(self.sz)
    }

    /// Stored values, ghost lanes included.
    pub fn len(&self) -> usize {
        self.sz * self.n() * self.n_groups()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn with_direction(&self, direction: Direction) -> Result<Self> {
        Self::build(self.nx, self.ny, self.nz, self.sz, direction, self.padded)
    }

    /// Same layout with a different extent along the line direction.
    pub fn with_line_extent(&self, n: usize) -> Result<Self> {
        let mut e = self.extents();
        e[self.direction.axis()] = n;
        Self::build(e[0], e[1], e[2], self.sz, self.direction, self.padded)
    }

    fn split(&self, i: usize, j: usize, k: usize) -> (usize, usize) {
        match self.direction {
            Direction::X => (i, j + self.ny * k),
            Direction::Y => (j, i + self.nx * k),
            Direction::Z => (k, i + self.nx * j),
        }
    }

    pub fn cartesian_to_packed(&self, i: usize, j: usize, k: usize) -> Result<PackedIndex> {
        if i >= self.nx || j >= self.ny || k >= self.nz {
            return Err(TdsError::OutOfBounds {
                i,
                j,
                k,
                nx: self.nx,
                ny: self.ny,
                nz: self.nz,
            });
        }
        let (position, t) = self.split(i, j, k);
        Ok(PackedIndex {
            lane: t % self.sz,
            position,
            group: t / self.sz,
        })
    }

    /// Inverse of [`Self::cartesian_to_packed`]; `None` for ghost lanes.
    pub fn packed_to_cartesian(&self, idx: PackedIndex) -> Option<(usize, usize, usize)> {
        let t = idx.group * self.sz + idx.lane;
        if t >= self.transverse() || idx.position >= self.n() || idx.lane >= self.sz {
            return None;
        }
        let p = idx.position;
        Some(match self.direction {
            Direction::X => (p, t % self.ny, t / self.ny),
            Direction::Y => (t % self.nx, p, t / self.nx),
            Direction::Z => (t % self.nx, t / self.nx, p),
        })
    }

    pub fn linear(&self, idx: PackedIndex) -> usize {
        idx.lane + self.sz * (idx.position + self.n() * idx.group)
    }

    fn linear_unchecked(&self, i: usize, j: usize, k: usize) -> usize {
        let (position, t) = self.split(i, j, k);
        t % self.sz + self.sz * (position + self.n() * (t / self.sz))
    }
}

/// Plain x-fastest storage: `(i, j, k)` at `i + nx * (j + ny * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianField {
    nx: usize,
    ny: usize,
    nz: usize,
    data: Vec<f64>,
}

impl CartesianField {
    pub fn new(nx: usize, ny: usize, nz: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nx * ny * nz {
            return Err(TdsError::ShapeMismatch(format!(
                "{} values for extents ({nx}, {ny}, {nz})",
                data.len()
            )));
        }
        Ok(Self { nx, ny, nz, data })
    }

    pub fn from_fn(
        nx: usize,
        ny: usize,
        nz: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { nx, ny, nz, data }
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[i + self.nx * (j + self.ny * k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[i + self.nx * (j + self.ny * k)] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedField {
    layout: LayoutDescriptor,
    data: Vec<f64>,
}

impl GroupedField {
    pub fn zeros(layout: LayoutDescriptor) -> Self {
        Self {
            layout,
            data: vec![0.0; layout.len()],
        }
    }

    pub fn from_data(layout: LayoutDescriptor, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(TdsError::ShapeMismatch(format!(
                "{} values for a layout of {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, data })
    }

    /// Evaluates `f` at every real grid point; ghost lanes stay zero.
    pub fn from_fn(layout: LayoutDescriptor, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(layout);
        let [nx, ny, nz] = layout.extents();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.data[layout.linear_unchecked(i, j, k)] = f(i, j, k);
                }
            }
        }
        out
    }

    pub fn pack(field: &CartesianField, layout: LayoutDescriptor) -> Result<Self> {
        if field.extents() != layout.extents() {
            return Err(TdsError::ShapeMismatch(format!(
                "field extents {:?} differ from layout {:?}",
                field.extents(),
                layout.extents()
            )));
        }
        Ok(Self::from_fn(layout, |i, j, k| field.get(i, j, k)))
    }

    pub fn unpack(&self) -> CartesianField {
        let [nx, ny, nz] = self.layout.extents();
        CartesianField::from_fn(nx, ny, nz, |i, j, k| {
            self.data[self.layout.linear_unchecked(i, j, k)]
        })
    }

    /// Regroups the same values into lines along `to`. Every point is read
    /// once and written once.
    pub fn reorder(&self, to: Direction) -> Result<Self> {
        let target = self.layout.with_direction(to)?;
        if to == self.layout.direction() {
            return Ok(self.clone());
        }
        let src = &self.layout;
        let block = target.sz() * target.n();
        let mut data = vec![0.0; target.len()];
        data.par_chunks_mut(block)
            .enumerate()
            .for_each(|(group, chunk)| {
                for position in 0..target.n() {
                    for lane in 0..target.sz() {
                        let idx = PackedIndex {
                            lane,
                            position,
                            group,
                        };
                        if let Some((i, j, k)) = target.packed_to_cartesian(idx) {
                            chunk[lane + target.sz() * position] =
                                self.data[src.linear_unchecked(i, j, k)];
                        }
                    }
                }
            });
        Ok(Self {
            layout: target,
            data,
        })
    }

    /// Adds `other`, stored along any direction, into this field point by
    /// point. One read of `other` and one read-write of `self` per point.
    pub fn accumulate_from(&mut self, other: &GroupedField) -> Result<()> {
        if self.layout.extents() != other.layout.extents() {
            return Err(TdsError::ShapeMismatch(format!(
                "accumulating {:?} into {:?}",
                other.layout.extents(),
                self.layout.extents()
            )));
        }
        let dst = self.layout;
        let src = &other.layout;
        let block = dst.sz() * dst.n();
        self.data
            .par_chunks_mut(block)
            .enumerate()
            .for_each(|(group, chunk)| {
                for position in 0..dst.n() {
                    for lane in 0..dst.sz() {
                        let idx = PackedIndex {
                            lane,
                            position,
                            group,
                        };
                        if let Some((i, j, k)) = dst.packed_to_cartesian(idx) {
                            chunk[lane + dst.sz() * position] +=
                                other.data[src.linear_unchecked(i, j, k)];
                        }
                    }
                }
            });
        Ok(())
    }

    pub fn layout(&self) -> &LayoutDescriptor {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        let idx = self.layout.cartesian_to_packed(i, j, k)?;
        Ok(self.data[self.layout.linear(idx)])
    }

    /// Values of one group: `sz * n` entries, lane-fastest.
    pub fn group(&self, g: usize) -> &[f64] {
        let block = self.group_len();
        &self.data[g * block..(g + 1) * block]
    }

    pub fn group_len(&self) -> usize {
        self.layout.sz() * self.layout.n()
    }

    /// One line gathered out of its group.
    pub fn line(&self, lane: usize, group: usize) -> Vec<f64> {
        let sz = self.layout.sz();
        self.group(group)
            .iter()
            .skip(lane)
            .step_by(sz)
            .copied()
            .collect()
    }

    /// Splits every line into consecutive position ranges of the given sizes.
    /// Each group's slice of a range is contiguous, so this is a copy of
    /// `n_groups` blocks per part.
    pub fn split_positions(&self, sizes: &[usize]) -> Result<Vec<GroupedField>> {
        let n = self.layout.n();
        if sizes.iter().sum::<usize>() != n || sizes.contains(&0) {
            return Err(TdsError::InvalidPartition(format!(
                "sizes {sizes:?} do not split a line of {n}"
            )));
        }
        let sz = self.layout.sz();
        let mut offset = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &m in sizes {
            let layout = self.layout.with_line_extent(m)?;
            let mut data = Vec::with_capacity(layout.len());
            for g in 0..self.layout.n_groups() {
                data.extend_from_slice(&self.group(g)[sz * offset..sz * (offset + m)]);
            }
            parts.push(GroupedField { layout, data });
            offset += m;
        }
        Ok(parts)
    }

    /// Inverse of [`Self::split_positions`].
    pub fn concat_positions(parts: &[GroupedField]) -> Result<GroupedField> {
        let first = parts
            .first()
            .ok_or_else(|| TdsError::InvalidPartition("nothing to concatenate".into()))?;
        let n: usize = parts.iter().map(|p| p.layout.n()).sum();
        let layout = first.layout.with_line_extent(n)?;
        if parts
            .iter()
            .any(|p| p.layout.with_line_extent(n).ok() != Some(layout))
        {
            return Err(TdsError::ShapeMismatch(
                "parts have different layouts".into(),
            ));
        }
        let mut data = Vec::with_capacity(layout.len());
        for g in 0..layout.n_groups() {
            for p in parts {
                data.extend_from_slice(p.group(g));
            }
        }
        Ok(GroupedField { layout, data })
    }

    pub fn max_abs_diff(&self, other: &GroupedField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(i: usize, j: usize, k: usize) -> f64 {
        (i + 100 * j + 10_000 * k) as f64
    }

    #[test]
    fn accumulate_across_directions() {
        let x = LayoutDescriptor::new(6, 4, 2, 4, Direction::X).unwrap();
        let mut acc = GroupedField::from_fn(x, ramp);
        let z = GroupedField::from_fn(x.with_direction(Direction::Z).unwrap(), |i, j, k| {
            -ramp(i, j, k) + 1.0
        });
        acc.accumulate_from(&z).unwrap();
        assert!(acc.data().iter().all(|v| *v == 1.0));
        let other = GroupedField::zeros(LayoutDescriptor::new(6, 4, 4, 4, Direction::X).unwrap());
        assert!(acc.accumulate_from(&other).is_err());
    }

    #[test]
    fn first_x_line_of_example_domain_is_lane_zero() {
        let layout = LayoutDescriptor::new(32, 8, 4, 4, Direction::X).unwrap();
        for i in 0..32 {
            let idx = layout.cartesian_to_packed(i, 0, 0).unwrap();
            assert_eq!(
                idx,
                PackedIndex {
                    lane: 0,
                    position: i,
                    group: 0
                }
            );
        }
        assert_eq!(layout.n_groups(), 8);
        // lines y = 0..3 of the z = 0 plane share the first group
        assert_eq!(layout.cartesian_to_packed(0, 3, 0).unwrap().group, 0);
        assert_eq!(layout.cartesian_to_packed(0, 4, 0).unwrap().group, 1);
        assert_eq!(layout.cartesian_to_packed(0, 0, 1).unwrap().group, 2);
    }

    #[test]
    fn sz_one_is_line_major() {
        let layout = LayoutDescriptor::new(5, 3, 2, 1, Direction::X).unwrap();
        for k in 0..2 {
            for j in 0..3 {
                for i in 0..5 {
                    let idx = layout.cartesian_to_packed(i, j, k).unwrap();
                    assert_eq!(layout.linear(idx), i + 5 * (j + 3 * k));
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_is_reported() {
        let layout = LayoutDescriptor::new(4, 4, 4, 4, Direction::Y).unwrap();
        assert!(matches!(
            layout.cartesian_to_packed(0, 4, 0),
            Err(TdsError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn ramp_spot_checks() {
        let layout = LayoutDescriptor::new(8, 4, 4, 4, Direction::X).unwrap();
        let packed = GroupedField::pack(&CartesianField::from_fn(8, 4, 4, ramp), layout).unwrap();
        // (i, j, k) -> t = j + 4k, lane = t % 4, group = t / 4, linear = lane + 4 (i + 8 group)
        for (i, j, k) in [(0, 0, 0), (7, 3, 0), (2, 1, 3), (5, 0, 2), (7, 3, 3)] {
            let t = j + 4 * k;
            let linear = t % 4 + 4 * (i + 8 * (t / 4));
            assert_eq!(packed.data()[linear], ramp(i, j, k));
        }
        assert_eq!(packed.data()[0..4], [0.0, 100.0, 200.0, 300.0]);
    }

    #[test]
    fn divisibility_error_and_padding() {
        assert!(matches!(
            LayoutDescriptor::new(8, 3, 3, 4, Direction::X),
            Err(TdsError::Divisibility {
                transverse: 9,
                sz: 4
            })
        ));
        let layout = LayoutDescriptor::padded(8, 3, 3, 4, Direction::X).unwrap();
        assert_eq!(layout.n_groups(), 3);
        assert_eq!(layout.len(), 4 * 8 * 3);
        let field = CartesianField::from_fn(8, 3, 3, ramp);
        let packed = GroupedField::pack(&field, layout).unwrap();
        assert_eq!(packed.unpack(), field);
        // ghost lanes 1..4 of the last group are zero
        assert!(packed.line(1, 2).iter().all(|v| *v == 0.0));
        let y = packed.reorder(Direction::Y).unwrap();
        assert_eq!(y.unpack(), field);
    }

    #[test]
    fn reorder_to_same_direction_copies() {
        let layout = LayoutDescriptor::new(6, 4, 2, 4, Direction::Z).unwrap();
        let f = GroupedField::from_fn(layout, ramp);
        assert_eq!(f.reorder(Direction::Z).unwrap(), f);
    }

    #[test]
    fn marked_value_lands_at_y_layout_index() {
        let layout = LayoutDescriptor::new(16, 16, 16, 8, Direction::X).unwrap();
        let f = GroupedField::from_fn(
            layout,
            |i, j, k| if (i, j, k) == (3, 5, 7) { 1.0 } else { 0.0 },
        );
        let y = f.reorder(Direction::Y).unwrap();
        // t = i + 16 k = 115, lane 3, group 14, position 5 -> 3 + 8 (5 + 16 * 14)
        let hits: Vec<usize> = (0..y.data().len())
            .filter(|&p| y.data()[p] != 0.0)
            .collect();
        assert_eq!(hits, vec![1835]);
    }

    #[test]
    fn split_and_concat_positions() {
        let layout = LayoutDescriptor::new(12, 4, 2, 4, Direction::X).unwrap();
        let f = GroupedField::from_fn(layout, ramp);
        let parts = f.split_positions(&[5, 4, 3]).unwrap();
        assert_eq!(parts[1].layout().n(), 4);
        assert_eq!(
            parts[1].line(2, 1),
            (5..9).map(|i| ramp(i, 2, 1)).collect::<Vec<_>>()
        );
        assert_eq!(GroupedField::concat_positions(&parts).unwrap(), f);
        assert!(f.split_positions(&[5, 5]).is_err());
    }

    proptest! {
        #[test]
        fn packed_indices_form_a_bijection(
            nx in 1usize..7, ny in 1usize..7, nz in 1usize..7, sz in 1usize..5, d in 0usize..3,
        ) {
            let dir = Direction::ALL[d];
            let layout = LayoutDescriptor::padded(nx, ny, nz, sz, dir).unwrap();
            let mut seen = vec![false; layout.len()];
            for k in 0..nz { for j in 0..ny { for i in 0..nx {
                let idx = layout.cartesian_to_packed(i, j, k).unwrap();
                prop_assert_eq!(idx.position, [i, j, k][dir.axis()]);
                let p = layout.linear(idx);
                prop_assert!(!seen[p]);
                seen[p] = true;
                prop_assert_eq!(layout.packed_to_cartesian(idx), Some((i, j, k)));
            }}}
            let real = seen.iter().filter(|s| **s).count();
            prop_assert_eq!(real, nx * ny * nz);
            if !layout.is_padded() || layout.transverse().is_multiple_of(sz) {
                prop_assert!(seen.iter().all(|s| *s));
            }
        }

        #[test]
        fn lane_contiguity(nx in 1usize..6, ny in 1usize..6, sz in 1usize..5) {
            let layout = LayoutDescriptor::padded(nx, ny, 4, sz, Direction::X).unwrap();
            for g in 0..layout.n_groups() {
                for p in 0..layout.n() {
                    let base = layout.linear(PackedIndex { lane: 0, position: p, group: g });
                    for lane in 0..sz {
                        prop_assert_eq!(layout.linear(PackedIndex { lane, position: p, group: g }), base + lane);
                    }
                }
            }
        }

        #[test]
        fn reorder_cycle_is_identity(seed in any::<u64>(), sz in prop::sample::select(vec![1usize, 2, 4])) {
            let layout = LayoutDescriptor::new(4, 4, 4, sz, Direction::X).unwrap();
            let f = GroupedField::from_fn(layout, |i, j, k| {
                ((seed ^ (i as u64 * 7919 + j as u64 * 104_729 + k as u64 * 1_299_709)) % 10_007) as f64
            });
            let back = f.reorder(Direction::Y).unwrap()
                .reorder(Direction::Z).unwrap()
                .reorder(Direction::X).unwrap();
            prop_assert_eq!(back, f.clone());
            prop_assert_eq!(f.reorder(Direction::Y).unwrap().reorder(Direction::X).unwrap(), f);
        }
    }
}
