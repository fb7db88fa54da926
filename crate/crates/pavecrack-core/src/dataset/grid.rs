//! Deterministic tiling of survey frames into fixed-size patches.

use image::RgbImage;

use super::{DatasetError, PatchSample};
use crate::par;

/// Geometry of a rectangular patch grid over a survey frame.
///
/// Patches are `patch_size` square, laid out `rows` x `cols` starting at
/// `(origin_x, origin_y)` with the given strides. With `stride >=
/// patch_size` (the default produced by [`GridSpec::disjoint`]) no two
/// patches share a source pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub patch_size: u32,
    pub rows: u32,
    pub cols: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub stride_x: u32,
    pub stride_y: u32,
}

/// Frame resolution produced by the survey vehicle camera.
pub const SURVEY_FRAME_WIDTH: u32 = 2440;
/// See [`SURVEY_FRAME_WIDTH`].
pub const SURVEY_FRAME_HEIGHT: u32 = 1080;
/// Side length of a dataset patch.
pub const DEFAULT_PATCH_SIZE: u32 = 200;

impl GridSpec {
    /// Disjoint tiling: stride equals the patch side.
    pub fn disjoint(rows: u32, cols: u32, patch_size: u32, origin_x: u32, origin_y: u32) -> Self {
        Self {
            patch_size,
            rows,
            cols,
            origin_x,
            origin_y,
            stride_x: patch_size,
            stride_y: patch_size,
        }
    }

    /// Default grid for 2440x1080 survey frames: 2 rows x 6 cols of
    /// 200x200 disjoint patches, horizontally centred and vertically
    /// centred within the lower (near-field, in-focus) half of the frame.
    pub fn default_survey() -> Self {
        Self::centered_lower(2, 6, DEFAULT_PATCH_SIZE, SURVEY_FRAME_WIDTH, SURVEY_FRAME_HEIGHT)
            .expect("survey grid fits the survey frame")
    }

    /// Disjoint grid placed like the survey default on an arbitrary
    /// frame: horizontally centred, vertically centred in the lower
    /// half (falling back to full-frame centring when too tall).
    pub fn centered_lower(
        rows: u32,
        cols: u32,
        patch_size: u32,
        frame_width: u32,
        frame_height: u32,
    ) -> Result<Self, DatasetError> {
        let band_width = cols * patch_size;
        let band_height = rows * patch_size;
        if band_width > frame_width || band_height > frame_height {
            let grid = Self::disjoint(rows, cols, patch_size, 0, 0);
            grid.validate_for(frame_width, frame_height)?;
        }
        let origin_x = (frame_width - band_width) / 2;
        let lower_half = frame_height / 2;
        let origin_y = if band_height <= frame_height - lower_half {
            lower_half + (frame_height - lower_half - band_height) / 2
        } else {
            (frame_height - band_height) / 2
        };
        Ok(Self::disjoint(rows, cols, patch_size, origin_x, origin_y))
    }

    /// Number of patches the grid produces.
    pub fn patch_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    /// True when no two patches can share a source pixel.
    pub fn is_disjoint(&self) -> bool {
        self.stride_x >= self.patch_size && self.stride_y >= self.patch_size
    }

    /// Top-left frame coordinate of the patch at `(row, col)`.
    pub fn patch_origin(&self, row: u32, col: u32) -> (u32, u32) {
        (
            self.origin_x + col * self.stride_x,
            self.origin_y + row * self.stride_y,
        )
    }

    /// Total extent required of the frame along x and y.
    pub fn required_extent(&self) -> (u32, u32) {
        (
            self.origin_x + (self.cols - 1) * self.stride_x + self.patch_size,
            self.origin_y + (self.rows - 1) * self.stride_y + self.patch_size,
        )
    }

    /// Check the grid fits a frame of the given dimensions.
    pub fn validate_for(&self, width: u32, height: u32) -> Result<(), DatasetError> {
        if self.rows == 0 || self.cols == 0 || self.patch_size == 0 {
            return Err(DatasetError::EmptyGrid);
        }
        let (need_x, need_y) = self.required_extent();
        if need_x > width {
            return Err(DatasetError::GridOutOfBounds {
                axis: 'x',
                required: need_x,
                available: width,
            });
        }
        if need_y > height {
            return Err(DatasetError::GridOutOfBounds {
                axis: 'y',
                required: need_y,
                available: height,
            });
        }
        Ok(())
    }
}

/// Copy one patch sub-rectangle out of the frame, byte for byte.
fn copy_patch(frame: &RgbImage, x0: u32, y0: u32, side: u32) -> RgbImage {
    let mut out = RgbImage::new(side, side);
    let src_w = frame.width() as usize;
    let src = frame.as_raw();
    let dst = out.as_mut();
    let row_bytes = side as usize * 3;
    for dy in 0..side as usize {
        let src_off = ((y0 as usize + dy) * src_w + x0 as usize) * 3;
        let dst_off = dy * row_bytes;
        dst[dst_off..dst_off + row_bytes].copy_from_slice(&src[src_off..src_off + row_bytes]);
    }
    out
}

/// Extract every grid patch from a frame.
///
/// Returns exactly `rows * cols` unlabeled samples in row-major order,
/// each carrying its grid position and `frame_id`. Pixels are copied
/// directly from the frame with no resampling.
pub fn extract_patches(
    frame: &RgbImage,
    grid: &GridSpec,
    frame_id: &str,
) -> Result<Vec<PatchSample>, DatasetError> {
    grid.validate_for(frame.width(), frame.height())?;
    let cols = grid.cols;
    let patches = par::map_indexed(grid.patch_count(), |i| {
        let row = i as u32 / cols;
        let col = i as u32 % cols;
        let (x0, y0) = grid.patch_origin(row, col);
        PatchSample {
            pixels: copy_patch(frame, x0, y0, grid.patch_size),
            label: None,
            source_frame_id: frame_id.to_string(),
            grid_row: row,
            grid_col: col,
            transform_tag: super::IDENTITY_TAG.to_string(),
        }
    });
    Ok(patches)
}

/// Decode a frame image, requiring 8-bit 3-channel content.
pub fn decode_frame(path: &std::path::Path) -> Result<RgbImage, DatasetError> {
    let dynamic = image::open(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    match dynamic {
        image::DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(DatasetError::FrameFormat {
            found: other.color(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_survey_grid_is_twelve_patches_inside_frame() {
        let grid = GridSpec::default_survey();
        assert_eq!(grid.patch_count(), 12);
        assert_eq!(grid.origin_x, 620);
        assert!(grid.is_disjoint());
        grid.validate_for(SURVEY_FRAME_WIDTH, SURVEY_FRAME_HEIGHT)
            .unwrap();
        let (_, need_y) = grid.required_extent();
        assert!(grid.origin_y >= SURVEY_FRAME_HEIGHT / 2, "lower half");
        assert!(need_y <= SURVEY_FRAME_HEIGHT);
    }

    #[test]
    fn survey_frame_yields_twelve_200_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frame = synth::textured_frame(&mut rng, SURVEY_FRAME_WIDTH, SURVEY_FRAME_HEIGHT);
        let patches = extract_patches(&frame, &GridSpec::default_survey(), "f0").unwrap();
        assert_eq!(patches.len(), 12);
        for p in &patches {
            assert_eq!(p.pixels.dimensions(), (200, 200));
            assert!(p.grid_row < 2 && p.grid_col < 6);
        }
    }

    #[test]
    fn identity_tiling_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = synth::textured_frame(&mut rng, 200, 200);
        let grid = GridSpec::disjoint(1, 1, 200, 0, 0);
        let patches = extract_patches(&frame, &grid, "f").unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].pixels.as_raw(), frame.as_raw());
    }

    #[test]
    fn two_by_two_reassembly_reproduces_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = synth::textured_frame(&mut rng, 400, 400);
        let grid = GridSpec::disjoint(2, 2, 200, 0, 0);
        let patches = extract_patches(&frame, &grid, "f").unwrap();
        assert_eq!(patches.len(), 4);
        // Direct-indexing reassembly: every patch pixel must equal the
        // frame pixel at origin + local offset.
        let mut rebuilt = RgbImage::new(400, 400);
        for p in &patches {
            let (x0, y0) = grid.patch_origin(p.grid_row, p.grid_col);
            for y in 0..200 {
                for x in 0..200 {
                    rebuilt.put_pixel(x0 + x, y0 + y, *p.pixels.get_pixel(x, y));
                }
            }
        }
        assert_eq!(rebuilt.as_raw(), frame.as_raw());
    }

    #[test]
    fn out_of_bounds_names_the_axis() {
        let frame = RgbImage::new(300, 500);
        let grid = GridSpec::disjoint(1, 2, 200, 0, 0); // needs 400 along x
        match extract_patches(&frame, &grid, "f") {
            Err(DatasetError::GridOutOfBounds { axis: 'x', required, available }) => {
                assert_eq!((required, available), (400, 300));
            }
            other => panic!("expected x-axis bound error, got {other:?}"),
        }
        let grid_y = GridSpec::disjoint(3, 1, 200, 0, 0); // needs 600 along y
        match extract_patches(&frame, &grid_y, "f") {
            Err(DatasetError::GridOutOfBounds { axis: 'y', .. }) => {}
            other => panic!("expected y-axis bound error, got {other:?}"),
        }
    }

    #[test]
    fn disjoint_patches_share_no_pixels() {
        let grid = GridSpec::disjoint(2, 3, 50, 10, 20);
        // Interval arithmetic on source coordinates.
        let mut seen = std::collections::HashSet::new();
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let (x0, y0) = grid.patch_origin(r, c);
                for y in y0..y0 + grid.patch_size {
                    for x in x0..x0 + grid.patch_size {
                        assert!(seen.insert((x, y)), "pixel ({x},{y}) covered twice");
                    }
                }
            }
        }
    }
}
