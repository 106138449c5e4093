//! 3D multicontrast volumes: storage, orientation permutations, and
//! percentile intensity normalization.
//!
//! Voxel data is stored x-fastest (column-major, matching the on-disk
//! layout): linear index = `i + nx*(j + ny*k)`. A volume's orientation
//! names the view obtained by slicing along the LAST array axis. Axial is
//! the canonical layout; coronal and sagittal are pure axis permutations
//! of it. Slicing a volume yields 2D planes of shape `(dim1, dim0)`.

use crate::error::{Error, Result};

/// View obtained by slicing along the last array axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [
        Orientation::Axial,
        Orientation::Coronal,
        Orientation::Sagittal,
    ];

    /// Canonical (axial-layout) axis held by each array axis in this view.
    ///
    /// Axial is the identity; coronal slices along canonical y, sagittal
    /// along canonical x.
    fn axes(self) -> [usize; 3] {
        match self {
            Orientation::Axial => [0, 1, 2],
            Orientation::Coronal => [0, 2, 1],
            Orientation::Sagittal => [1, 2, 0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(Orientation::Axial),
            "coronal" => Ok(Orientation::Coronal),
            "sagittal" => Ok(Orientation::Sagittal),
            other => Err(Error::parameter(
                "orientation",
                format!("expected axial|coronal|sagittal, got `{other}`"),
            )),
        }
    }
}

/// A 3D scalar grid with voxel spacing and an orientation tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f64>,
    shape: (usize, usize, usize),
    spacing: [f64; 3],
    orientation: Orientation,
}

impl Volume {
    pub fn new(
        data: Vec<f64>,
        shape: (usize, usize, usize),
        spacing: [f64; 3],
        orientation: Orientation,
    ) -> Result<Self> {
        let (nx, ny, nz) = shape;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::parameter("shape", format!("{shape:?} has a zero axis")));
        }
        if data.len() != nx * ny * nz {
            return Err(Error::shape(
                "volume data length",
                &[nx * ny * nz],
                &[data.len()],
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: "volume construction".into(),
                reason: format!("non-finite intensity {bad}"),
            });
        }
        Ok(Volume {
            data,
            shape,
            spacing,
            orientation,
        })
    }

    /// Uniform-valued volume, axial, unit spacing.
    pub fn filled(shape: (usize, usize, usize), value: f64) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        Volume {
            data: vec![value; n],
            shape,
            spacing: [1.0; 3],
            orientation: Orientation::Axial,
        }
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

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape.0 * (j + self.shape.1 * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Number of 2D planes along the slicing axis.
    pub fn slice_count(&self) -> usize {
        self.shape.2
    }

    /// Copy plane `k` out as a row-major `(dim1, dim0)` buffer.
    pub fn slice_plane(&self, k: usize) -> Vec<f64> {
        let (nx, ny, _) = self.shape;
        let base = nx * ny * k;
        self.data[base..base + nx * ny].to_vec()
    }

    /// Write plane `k` back from a row-major `(dim1, dim0)` buffer.
    pub fn set_slice_plane(&mut self, k: usize, plane: &[f64]) {
        let (nx, ny, _) = self.shape;
        assert_eq!(plane.len(), nx * ny, "plane size mismatch");
        let base = nx * ny * k;
        self.data[base..base + nx * ny].copy_from_slice(plane);
    }

    /// Permute the array so that slicing along the last axis yields planes
    /// of `target`. No resampling: every intensity is preserved exactly.
    pub fn reorient(&self, target: Orientation) -> Volume {
        if target == self.orientation {
            return self.clone();
        }
        let (data, shape, spacing) = reorient_raw(
            &self.data,
            self.shape,
            self.spacing,
            self.orientation,
            target,
        );
        Volume {
            data,
            shape,
            spacing,
            orientation: target,
        }
    }
}

/// A binary {0,1} mask on the same grid as a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    data: Vec<u8>,
    shape: (usize, usize, usize),
    spacing: [f64; 3],
    orientation: Orientation,
}

impl MaskVolume {
    pub fn new(
        data: Vec<u8>,
        shape: (usize, usize, usize),
        spacing: [f64; 3],
        orientation: Orientation,
    ) -> Result<Self> {
        let (nx, ny, nz) = shape;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::parameter("shape", format!("{shape:?} has a zero axis")));
        }
        if data.len() != nx * ny * nz {
            return Err(Error::shape("mask data length", &[nx * ny * nz], &[data.len()]));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!(
                "mask contains value {bad}, expected 0 or 1"
            )));
        }
        Ok(MaskVolume {
            data,
            shape,
            spacing,
            orientation,
        })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        MaskVolume {
            data: vec![0; shape.0 * shape.1 * shape.2],
            shape,
            spacing: [1.0; 3],
            orientation: Orientation::Axial,
        }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape.0 * (j + self.shape.1 * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: u8) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn slice_count(&self) -> usize {
        self.shape.2
    }

    pub fn slice_plane(&self, k: usize) -> Vec<u8> {
        let (nx, ny, _) = self.shape;
        let base = nx * ny * k;
        self.data[base..base + nx * ny].to_vec()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Voxels set in `self` but not in `other`.
    pub fn count_outside(&self, other: &MaskVolume) -> usize {
        self.data
            .iter()
            .zip(other.data.iter())
            .filter(|(&a, &b)| a == 1 && b == 0)
            .count()
    }

    pub fn union_with(&mut self, other: &MaskVolume) {
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a |= b;
        }
    }

    pub fn reorient(&self, target: Orientation) -> MaskVolume {
        if target == self.orientation {
            return self.clone();
        }
        let (data, shape, spacing) = reorient_raw(
            &self.data,
            self.shape,
            self.spacing,
            self.orientation,
            target,
        );
        MaskVolume {
            data,
            shape,
            spacing,
            orientation: target,
        }
    }

    /// Morphological dilation by `radius` steps of 6-connected growth.
    pub fn dilate(&self, radius: usize) -> MaskVolume {
        let (nx, ny, nz) = self.shape;
        let mut current = self.data.clone();
        for _ in 0..radius {
            let prev = current.clone();
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        let idx = i + nx * (j + ny * k);
                        if prev[idx] == 1 {
                            continue;
                        }
                        let hit = (i > 0 && prev[idx - 1] == 1)
                            || (i + 1 < nx && prev[idx + 1] == 1)
                            || (j > 0 && prev[idx - nx] == 1)
                            || (j + 1 < ny && prev[idx + nx] == 1)
                            || (k > 0 && prev[idx - nx * ny] == 1)
                            || (k + 1 < nz && prev[idx + nx * ny] == 1);
                        if hit {
                            current[idx] = 1;
                        }
                    }
                }
            }
        }
        MaskVolume {
            data: current,
            shape: self.shape,
            spacing: self.spacing,
            orientation: self.orientation,
        }
    }
}

/// Shared permutation kernel for volumes and masks.
fn reorient_raw<T: Copy + Default>(
    data: &[T],
    shape: (usize, usize, usize),
    spacing: [f64; 3],
    from: Orientation,
    to: Orientation,
) -> (Vec<T>, (usize, usize, usize), [f64; 3]) {
    let from_axes = from.axes();
    let to_axes = to.axes();

    let old_dims = [shape.0, shape.1, shape.2];
    let mut canon_dims = [0usize; 3];
    let mut canon_spacing = [0f64; 3];
    for a in 0..3 {
        canon_dims[from_axes[a]] = old_dims[a];
        canon_spacing[from_axes[a]] = spacing[a];
    }
    let new_dims = [
        canon_dims[to_axes[0]],
        canon_dims[to_axes[1]],
        canon_dims[to_axes[2]],
    ];
    let new_spacing = [
        canon_spacing[to_axes[0]],
        canon_spacing[to_axes[1]],
        canon_spacing[to_axes[2]],
    ];

    // For each new array axis b, find the old array axis holding the same
    // canonical axis, i.e. old_axis[b] with from_axes[old_axis[b]] == to_axes[b].
    let mut old_axis = [0usize; 3];
    for b in 0..3 {
        old_axis[b] = from_axes.iter().position(|&c| c == to_axes[b]).unwrap();
    }

    let old_strides = [1, old_dims[0], old_dims[0] * old_dims[1]];
    let stride_for_new = [
        old_strides[old_axis[0]],
        old_strides[old_axis[1]],
        old_strides[old_axis[2]],
    ];

    let mut out = vec![T::default(); data.len()];
    let mut dst = 0;
    for u2 in 0..new_dims[2] {
        for u1 in 0..new_dims[1] {
            let base = u1 * stride_for_new[1] + u2 * stride_for_new[2];
            for u0 in 0..new_dims[0] {
                out[dst] = data[base + u0 * stride_for_new[0]];
                dst += 1;
            }
        }
    }
    (out, (new_dims[0], new_dims[1], new_dims[2]), new_spacing)
}

/// Raw-intensity bounds used for affine scaling to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormBounds {
    pub low: f64,
    pub high: f64,
}

impl NormBounds {
    pub fn is_degenerate(&self) -> bool {
        self.high <= self.low
    }

    /// Map a raw intensity to [-1, 1] (clamping to the bounds).
    pub fn normalize_raw(&self, raw: f64) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        let clamped = raw.clamp(self.low, self.high);
        2.0 * (clamped - self.low) / (self.high - self.low) - 1.0
    }

    /// Inverse of [`NormBounds::normalize_raw`] on the clamped range.
    pub fn denormalize(&self, normalized: f64) -> f64 {
        if self.is_degenerate() {
            return self.low;
        }
        (normalized + 1.0) / 2.0 * (self.high - self.low) + self.low
    }
}

/// Linearly interpolated percentile of an unsorted sample, `p` in [0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile_sorted(&sorted, p)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Clamp to the [p_low, p_high] percentile range, then map affinely to
/// [-1, 1]. A constant volume maps to all zeros with degenerate bounds.
pub fn normalize(v: &Volume, p_low: f64, p_high: f64) -> Result<(Volume, NormBounds)> {
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low >= p_high {
        return Err(Error::parameter(
            "percentiles",
            format!("need 0 <= p_low < p_high <= 100, got ({p_low}, {p_high})"),
        ));
    }
    let mut sorted = v.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let low = percentile_sorted(&sorted, p_low);
    let high = percentile_sorted(&sorted, p_high);
    let bounds = NormBounds { low, high };
    let data = v.data().iter().map(|&x| bounds.normalize_raw(x)).collect();
    let out = Volume {
        data,
        shape: v.shape(),
        spacing: v.spacing(),
        orientation: v.orientation(),
    };
    Ok((out, bounds))
}

/// Invert [`normalize`] back to the raw (clamped) intensity scale.
pub fn denormalize(v: &Volume, bounds: NormBounds) -> Volume {
    let data = v.data().iter().map(|&x| bounds.denormalize(x)).collect();
    Volume {
        data,
        shape: v.shape(),
        spacing: v.spacing(),
        orientation: v.orientation(),
    }
}

/// Canonical contrast order used by the engine and the checkpoint format.
pub const CONTRAST_NAMES: [&str; 3] = ["t1w", "t2w", "flair"];

/// An ordered set of co-registered contrasts in normalized intensity space.
///
/// Absent contrasts are stored as zero volumes with `presence == false`,
/// matching the dropout-trained conditioning convention.
#[derive(Debug, Clone)]
pub struct MultiContrastVolume {
    names: Vec<String>,
    volumes: Vec<Volume>,
    presence: Vec<bool>,
    bounds: Vec<NormBounds>,
    body: MaskVolume,
}

impl MultiContrastVolume {
    /// Normalize raw per-contrast volumes into one aligned multicontrast
    /// stack. `raw` entries are `(name, volume)`; `None` marks a missing
    /// contrast. At least one contrast must be present and all present
    /// contrasts must share shape, spacing, and orientation.
    pub fn from_raw(
        raw: Vec<(String, Option<Volume>)>,
        p_low: f64,
        p_high: f64,
    ) -> Result<Self> {
        let reference = raw
            .iter()
            .find_map(|(_, v)| v.as_ref())
            .ok_or_else(|| Error::Validation("no contrast provided".into()))?;
        let shape = reference.shape();
        let spacing = reference.spacing();
        let orientation = reference.orientation();

        let mut names = Vec::new();
        let mut volumes = Vec::new();
        let mut presence = Vec::new();
        let mut bounds = Vec::new();
        let mut body = vec![0u8; shape.0 * shape.1 * shape.2];

        for (name, vol) in raw {
            match vol {
                Some(v) => {
                    if v.shape() != shape {
                        return Err(Error::shape(
                            format!("contrast `{name}`"),
                            &[shape.0, shape.1, shape.2],
                            &[v.shape().0, v.shape().1, v.shape().2],
                        ));
                    }
                    if v.orientation() != orientation {
                        return Err(Error::Validation(format!(
                            "contrast `{name}` orientation {} differs from {}",
                            v.orientation().name(),
                            orientation.name()
                        )));
                    }
                    for (b, &x) in body.iter_mut().zip(v.data().iter()) {
                        if x > 0.0 {
                            *b = 1;
                        }
                    }
                    let (norm, nb) = normalize(&v, p_low, p_high)?;
                    names.push(name);
                    volumes.push(norm);
                    presence.push(true);
                    bounds.push(nb);
                }
                None => {
                    names.push(name);
                    volumes.push(Volume {
                        data: vec![0.0; shape.0 * shape.1 * shape.2],
                        shape,
                        spacing,
                        orientation,
                    });
                    presence.push(false);
                    bounds.push(NormBounds { low: 0.0, high: 0.0 });
                }
            }
        }

        let body = MaskVolume {
            data: body,
            shape,
            spacing,
            orientation,
        };
        Ok(MultiContrastVolume {
            names,
            volumes,
            presence,
            bounds,
            body,
        })
    }

    /// Wrap already-normalized volumes (used by the sampling pipeline when
    /// carrying intermediate results between views).
    pub fn from_normalized(
        names: Vec<String>,
        volumes: Vec<Volume>,
        presence: Vec<bool>,
        bounds: Vec<NormBounds>,
        body: MaskVolume,
    ) -> Self {
        MultiContrastVolume {
            names,
            volumes,
            presence,
            bounds,
            body,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contrasts(&self) -> usize {
        self.volumes.len()
    }

    pub fn volume(&self, c: usize) -> &Volume {
        &self.volumes[c]
    }

    pub fn volumes(&self) -> &[Volume] {
        &self.volumes
    }

    pub fn volumes_mut(&mut self) -> &mut [Volume] {
        &mut self.volumes
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn bounds(&self) -> &[NormBounds] {
        &self.bounds
    }

    pub fn body(&self) -> &MaskVolume {
        &self.body
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.volumes[0].shape()
    }

    pub fn orientation(&self) -> Orientation {
        self.volumes[0].orientation()
    }

    pub fn reorient(&self, target: Orientation) -> MultiContrastVolume {
        MultiContrastVolume {
            names: self.names.clone(),
            volumes: self.volumes.iter().map(|v| v.reorient(target)).collect(),
            presence: self.presence.clone(),
            bounds: self.bounds.clone(),
            body: self.body.reorient(target),
        }
    }

    /// Denormalize contrast `c` back to its raw intensity scale.
    pub fn denormalized(&self, c: usize) -> Volume {
        denormalize(&self.volumes[c], self.bounds[c])
    }
}
