//! Frames in the unified channel layout and their patch tokenization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of channels in the unified field representation.
pub const UNION_CHANNELS: usize = 7;

/// Slot order of the unified representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Density = 0,
    VelocityX = 1,
    VelocityY = 2,
    Pressure = 3,
    Vorticity = 4,
    Scalar = 5,
    NodeType = 6,
}

impl Channel {
    pub const ALL: [Channel; UNION_CHANNELS] = [
        Channel::Density,
        Channel::VelocityX,
        Channel::VelocityY,
        Channel::Pressure,
        Channel::Vorticity,
        Channel::Scalar,
        Channel::NodeType,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Density => "density",
            Channel::VelocityX => "u_x",
            Channel::VelocityY => "u_y",
            Channel::Pressure => "pressure",
            Channel::Vorticity => "vorticity",
            Channel::Scalar => "scalar",
            Channel::NodeType => "node_type",
        }
    }

    pub fn from_index(i: usize) -> Option<Channel> {
        Self::ALL.get(i).copied()
    }
}

pub fn channel_names() -> Vec<String> {
    Channel::ALL.iter().map(|c| c.name().to_string()).collect()
}

/// Which union slots carry data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelMask(pub [bool; UNION_CHANNELS]);

impl ChannelMask {
    pub fn from_channels(channels: &[Channel]) -> Self {
        let mut m = [false; UNION_CHANNELS];
        for c in channels {
            m[c.index()] = true;
        }
        Self(m)
    }

    pub fn is_valid(&self, c: usize) -> bool {
        self.0[c]
    }

    /// Valid and not the node-type indicator.
    pub fn counts_in_loss(&self, c: usize) -> bool {
        self.0[c] && c != Channel::NodeType.index()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..UNION_CHANNELS).filter(|&c| self.0[c]).collect()
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut m = self.0;
        for (a, b) in m.iter_mut().zip(other.0) {
            *a |= b;
        }
        Self(m)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("grid size Nx={nx} is not divisible by patch size Rx={rx}")]
    IndivisibleX { nx: usize, rx: usize },
    #[error("grid size Ny={ny} is not divisible by patch size Ry={ry}")]
    IndivisibleY { ny: usize, ry: usize },
    #[error("buffer of {len} values does not match shape {shape:?}")]
    BadBuffer { len: usize, shape: Vec<usize> },
    #[error("patch layout {layout:?} inconsistent with {len} patch values")]
    BadLayout { layout: PatchLayout, len: usize },
    #[error("channel id {0} is out of range for the {UNION_CHANNELS}-channel union")]
    ChannelOutOfRange(usize),
    #[error("channel id {0} listed more than once")]
    DuplicateChannel(usize),
    #[error("frames disagree on grid size: {0:?} vs {1:?}")]
    GridMismatch((usize, usize), (usize, usize)),
}

/// One solution snapshot on an `nx × ny` grid in the unified channel layout,
/// stored row-major as `[nx][ny][7]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    nx: usize,
    ny: usize,
    values: Vec<f32>,
    pub channel_mask: ChannelMask,
    pub time_index: usize,
    pub dt_record: f64,
}

impl Frame {
    /// Builds a frame, zeroing every channel the mask marks invalid.
    pub fn new(nx: usize, ny: usize, mut values: Vec<f32>, channel_mask: ChannelMask) -> Result<Self, PatchError> {
        if values.len() != nx * ny * UNION_CHANNELS || nx == 0 || ny == 0 {
            return Err(PatchError::BadBuffer {
                len: values.len(),
                shape: vec![nx, ny, UNION_CHANNELS],
            });
        }
        for px in values.chunks_exact_mut(UNION_CHANNELS) {
            for (c, v) in px.iter_mut().enumerate() {
                if !channel_mask.is_valid(c) {
                    *v = 0.0;
                }
            }
        }
        Ok(Self {
            nx,
            ny,
            values,
            channel_mask,
            time_index: 0,
            dt_record: 0.0,
        })
    }

    pub fn zeros(nx: usize, ny: usize, channel_mask: ChannelMask) -> Self {
        Self {
            nx,
            ny,
            values: vec![0.0; nx * ny * UNION_CHANNELS],
            channel_mask,
            time_index: 0,
            dt_record: 0.0,
        }
    }

    pub fn with_time(mut self, time_index: usize, dt_record: f64) -> Self {
        self.time_index = time_index;
        self.dt_record = dt_record;
        self
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access to the raw values. Callers must keep masked-off
    /// channels at zero.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, c: usize) -> usize {
        (x * self.ny + y) * UNION_CHANNELS + c
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.values[self.offset(x, y, c)]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let o = self.offset(x, y, c);
        self.values[o] = v;
    }

    /// All values of one channel in `[nx][ny]` order.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.values.iter().skip(c).step_by(UNION_CHANNELS).copied().collect()
    }

    pub fn patchify(&self, rx: usize, ry: usize) -> Result<PatchGrid<f32>, PatchError> {
        patchify(&self.values, [self.nx, self.ny, UNION_CHANNELS], rx, ry)
    }
}

/// Geometry of a patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub patches_x: usize,
    pub patches_y: usize,
    pub rx: usize,
    pub ry: usize,
    pub channels: usize,
}

impl PatchLayout {
    pub fn new(nx: usize, ny: usize, rx: usize, ry: usize, channels: usize) -> Result<Self, PatchError> {
        if rx == 0 || nx % rx != 0 {
            return Err(PatchError::IndivisibleX { nx, rx });
        }
        if ry == 0 || ny % ry != 0 {
            return Err(PatchError::IndivisibleY { ny, ry });
        }
        Ok(Self {
            patches_x: nx / rx,
            patches_y: ny / ry,
            rx,
            ry,
            channels,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.patches_x * self.patches_y
    }

    pub fn patch_len(&self) -> usize {
        self.rx * self.ry * self.channels
    }

    pub fn nx(&self) -> usize {
        self.patches_x * self.rx
    }

    pub fn ny(&self) -> usize {
        self.patches_y * self.ry
    }

    /// Source offset in the `[nx][ny][c]` buffer of element `j` of patch `k`.
    #[inline]
    fn source(&self, k: usize, j: usize) -> usize {
        let (px, py) = (k / self.patches_y, k % self.patches_y);
        let c = j % self.channels;
        let b = (j / self.channels) % self.ry;
        let a = j / (self.channels * self.ry);
        let x = px * self.rx + a;
        let y = py * self.ry + b;
        (x * self.ny() + y) * self.channels + c
    }
}

/// Patches in row-major order over `(patches_x, patches_y)`, each the
/// flattened `[rx][ry][c]` sub-block.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub patches: Vec<T>,
    pub layout: PatchLayout,
}

impl<T: Copy> PatchGrid<T> {
    pub fn patch(&self, k: usize) -> &[T] {
        let n = self.layout.patch_len();
        &self.patches[k * n..(k + 1) * n]
    }
}

pub fn patchify<T: Copy + Default>(
    data: &[T],
    [nx, ny, channels]: [usize; 3],
    rx: usize,
    ry: usize,
) -> Result<PatchGrid<T>, PatchError> {
    if data.len() != nx * ny * channels {
        return Err(PatchError::BadBuffer {
            len: data.len(),
            shape: vec![nx, ny, channels],
        });
    }
    let layout = PatchLayout::new(nx, ny, rx, ry, channels)?;
    let n = layout.patch_len();
    let mut patches = vec![T::default(); data.len()];
    for k in 0..layout.num_patches() {
        for j in 0..n {
            patches[k * n + j] = data[layout.source(k, j)];
        }
    }
    Ok(PatchGrid { patches, layout })
}

/// Inverse of [`patchify`]; returns the `[nx][ny][c]` buffer.
pub fn unpatchify<T: Copy + Default>(grid: &PatchGrid<T>) -> Result<Vec<T>, PatchError> {
    let layout = grid.layout;
    if layout.num_patches() * layout.patch_len() != grid.patches.len() || layout.patch_len() == 0 {
        return Err(PatchError::BadLayout {
            layout,
            len: grid.patches.len(),
        });
    }
    let n = layout.patch_len();
    let mut out = vec![T::default(); grid.patches.len()];
    for k in 0..layout.num_patches() {
        for j in 0..n {
            out[layout.source(k, j)] = grid.patches[k * n + j];
        }
    }
    Ok(out)
}

/// Copies dataset channels into their union slots.
///
/// `raw` is `[nx][ny][ids.len()]`; column `i` of the last axis goes to union
/// slot `ids[i]`.
pub fn to_union_channels(raw: &[f32], nx: usize, ny: usize, ids: &[usize]) -> Result<Frame, PatchError> {
    let mut seen = [false; UNION_CHANNELS];
    for &id in ids {
        if id >= UNION_CHANNELS {
            return Err(PatchError::ChannelOutOfRange(id));
        }
        if seen[id] {
            return Err(PatchError::DuplicateChannel(id));
        }
        seen[id] = true;
    }
    let c_ds = ids.len();
    if raw.len() != nx * ny * c_ds {
        return Err(PatchError::BadBuffer {
            len: raw.len(),
            shape: vec![nx, ny, c_ds],
        });
    }
    let mut frame = Frame::zeros(nx, ny, ChannelMask(seen));
    if c_ds == 0 {
        return Ok(frame);
    }
    for (p, src) in raw.chunks_exact(c_ds).enumerate() {
        for (i, &id) in ids.iter().enumerate() {
            frame.values[p * UNION_CHANNELS + id] = src[i];
        }
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_one_patch_geometry() {
        let f = Frame::zeros(128, 128, ChannelMask::default());
        let g = f.patchify(16, 16).unwrap();
        assert_eq!(g.layout.num_patches(), 64);
        assert_eq!(g.layout.patch_len(), 1792);
    }

    #[test]
    fn single_patch_is_flattened_frame() {
        let data: Vec<f32> = (0..4 * 6 * 7).map(|v| v as f32).collect();
        let g = patchify(&data, [4, 6, 7], 4, 6).unwrap();
        assert_eq!(g.layout.num_patches(), 1);
        assert_eq!(g.patches, data);
        assert_eq!(unpatchify(&g).unwrap(), data);
    }

    #[test]
    fn small_grid_matches_enumeration() {
        // 4x4 grid, 2x2 patches, one channel, values 0..15 row-major.
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let g = patchify(&data, [4, 4, 1], 2, 2).unwrap();
        let mut expected = Vec::new();
        for px in 0..2 {
            for py in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        let (x, y) = (px * 2 + a, py * 2 + b);
                        expected.push((x * 4 + y) as f32);
                    }
                }
            }
        }
        assert_eq!(g.patches, expected);
        assert_eq!(
            g.patches,
            vec![0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]
        );
        assert_eq!(unpatchify(&g).unwrap(), data);
    }

    #[test]
    fn indivisible_grid_names_dimensions() {
        let err = patchify(&[0.0f32; 10 * 8], [10, 8, 1], 4, 4).unwrap_err();
        assert_eq!(err, PatchError::IndivisibleX { nx: 10, rx: 4 });
        assert!(err.to_string().contains("Nx=10") && err.to_string().contains("Rx=4"));
    }

    #[test]
    fn inconsistent_layout_is_rejected() {
        let mut g = patchify(&[0.0f32; 16], [4, 4, 1], 2, 2).unwrap();
        g.patches.pop();
        assert!(matches!(unpatchify(&g), Err(PatchError::BadLayout { .. })));
    }

    #[test]
    fn union_masks_for_dataset_styles() {
        let incomp = to_union_channels(&[1.0; 4 * 3], 2, 2, &[1, 2, 5]).unwrap();
        assert_eq!(incomp.channel_mask.valid_indices(), vec![1, 2, 5]);
        let comp = to_union_channels(&[1.0; 4 * 4], 2, 2, &[0, 1, 2, 3]).unwrap();
        assert_eq!(comp.channel_mask.valid_indices(), vec![0, 1, 2, 3]);
        assert_eq!(comp.get(1, 1, 4), 0.0);
        let empty = to_union_channels(&[], 2, 2, &[]).unwrap();
        assert!(empty.values().iter().all(|v| *v == 0.0));
        assert!(empty.channel_mask.valid_indices().is_empty());
    }

    #[test]
    fn union_copies_into_slots() {
        let raw: Vec<f32> = (0..2 * 2 * 2).map(|v| v as f32).collect();
        let f = to_union_channels(&raw, 2, 2, &[5, 0]).unwrap();
        assert_eq!(f.get(0, 1, 5), 2.0);
        assert_eq!(f.get(0, 1, 0), 3.0);
    }

    #[test]
    fn union_rejects_bad_ids() {
        assert_eq!(
            to_union_channels(&[0.0; 8], 2, 2, &[1, 1]).unwrap_err(),
            PatchError::DuplicateChannel(1)
        );
        assert_eq!(
            to_union_channels(&[0.0; 4], 2, 2, &[7]).unwrap_err(),
            PatchError::ChannelOutOfRange(7)
        );
    }

    #[test]
    fn frame_zeroes_masked_channels() {
        let f = Frame::new(1, 1, vec![1.0; 7], ChannelMask::from_channels(&[Channel::Scalar])).unwrap();
        assert_eq!(f.values(), &[0., 0., 0., 0., 0., 1., 0.]);
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            pxs in 1usize..4, pys in 1usize..4, rx in 1usize..5, ry in 1usize..5, c in 1usize..8, seed in any::<u64>()
        ) {
            let (nx, ny) = (pxs * rx, pys * ry);
            let n = nx * ny * c;
            let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 * 0.5 - 7.0).collect();
            let g = patchify(&data, [nx, ny, c], rx, ry).unwrap();
            prop_assert_eq!(unpatchify(&g).unwrap(), data);
        }

        #[test]
        fn channels_never_mix(pxs in 1usize..3, pys in 1usize..3, rx in 1usize..4, ry in 1usize..4) {
            // Tagging every value with its channel, each patch entry keeps its channel.
            let (nx, ny, c) = (pxs * rx, pys * ry, 3);
            let data: Vec<usize> = (0..nx * ny * c).map(|i| i % c).collect();
            let g = patchify(&data, [nx, ny, c], rx, ry).unwrap();
            for k in 0..g.layout.num_patches() {
                for (j, v) in g.patch(k).iter().enumerate() {
                    prop_assert_eq!(*v, j % c);
                }
            }
        }
    }
}
