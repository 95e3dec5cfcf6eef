//! Raw clips, patch embedding and positional encodings.
//!
//! Clip files use a minimal little-endian container:
//!
//! ```text
//! "WVF1" | T u16 | H u16 | W u16 | channels u8 | T x H x W x channels u8
//! ```
//!
//! Pixels are frame-major, then row-major with interleaved channels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{cfg_err, dim_err, input_err, Error, Result};
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

pub const CLIP_MAGIC: &[u8; 4] = b"WVF1";

/// `T x tau`: number of sampled frames and the step between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingSpec {
    pub frames: usize,
    pub stride: usize,
}

impl SamplingSpec {
    pub fn new(frames: usize, stride: usize) -> Result<Self> {
        if frames < 2 || stride < 1 {
            return Err(cfg_err!(
                "sampling {frames}x{stride}: need T >= 2 and stride >= 1"
            ));
        }
        Ok(Self { frames, stride })
    }

    /// Raw frames spanned by one sample.
    pub fn span(&self) -> usize {
        self.frames * self.stride
    }
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            frames: 16,
            stride: 4,
        }
    }
}

/// Per-channel pixel normalization applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.45; 3],
            std: [0.225; 3],
        }
    }
}

/// Decoded clip: `frames x height x width x channels` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawClip {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            pixels: vec![0; frames * height * width * channels],
        }
    }

    #[inline]
    pub fn offset(&self, f: usize, y: usize, x: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels
    }

    pub fn keyframe(&self) -> usize {
        self.frames / 2
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CLIP_MAGIC)?;
        for d in [self.frames, self.height, self.width] {
            w.write_all(&(d as u16).to_le_bytes())?;
        }
        w.write_all(&[self.channels as u8])?;
        w.write_all(&self.pixels)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("<stream>", e);
        let mut head = [0u8; 11];
        r.read_exact(&mut head).map_err(io)?;
        if &head[..4] != CLIP_MAGIC {
            return Err(input_err!("bad clip magic {:?}", &head[..4]));
        }
        let u16_at = |i: usize| u16::from_le_bytes([head[i], head[i + 1]]) as usize;
        let (frames, height, width, channels) =
            (u16_at(4), u16_at(6), u16_at(8), head[10] as usize);
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(input_err!("clip header has a zero dimension"));
        }
        let mut pixels = vec![0u8; frames * height * width * channels];
        r.read_exact(&mut pixels).map_err(io)?;
        Ok(Self {
            frames,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    /// Indices of the sampled frames, centered on the clip.
    pub fn sample_indices(&self, sampling: SamplingSpec) -> Result<Vec<usize>> {
        if sampling.span() > self.frames {
            return Err(input_err!(
                "sampling {}x{} needs {} frames, clip has {}",
                sampling.frames,
                sampling.stride,
                sampling.span(),
                self.frames
            ));
        }
        let start = (self.frames - sampling.span()) / 2;
        Ok((0..sampling.frames)
            .map(|i| start + i * sampling.stride)
            .collect())
    }

    /// Samples and normalizes into a `[1, 3, T, H, W]` clip.
    pub fn to_video<T: Scalar>(
        &self,
        sampling: SamplingSpec,
        norm: &Normalization,
    ) -> Result<VideoTensor<T>> {
        if self.channels != 3 {
            return Err(input_err!(
                "expected 3 channels, clip has {}",
                self.channels
            ));
        }
        let idx = self.sample_indices(sampling)?;
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let t = idx.len();
        let mut data = vec![T::zero(); 3 * t * plane];
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            for (ti, &f) in idx.iter().enumerate() {
                let dst = &mut data[(c * t + ti) * plane..][..plane];
                let src = &self.pixels[self.offset(f, 0, 0)..][..plane * 3];
                for (d, px) in dst.iter_mut().zip(src.chunks_exact(3)) {
                    *d = T::of((px[c] as f64 / 255.0 - m) / s);
                }
            }
        }
        VideoTensor::new(Tensor::new(vec![1, 3, t, h, w], data)?, sampling)
    }
}

/// A normalized clip batch `[N, 3, T, H, W]`.
#[derive(Debug, Clone)]
pub struct VideoTensor<T> {
    pub data: Tensor<T>,
    pub sampling: SamplingSpec,
}

impl<T: Scalar> VideoTensor<T> {
    pub fn new(data: Tensor<T>, sampling: SamplingSpec) -> Result<Self> {
        let s = data.shape();
        if s.len() != 5 || s[1] != 3 {
            return Err(dim_err!("video tensor must be [N, 3, T, H, W], got {s:?}"));
        }
        if !s[2].is_multiple_of(2) {
            return Err(dim_err!(
                "video tensor needs an even frame count, got {}",
                s[2]
            ));
        }
        Ok(Self { data, sampling })
    }

    /// `[N, 3, T, H, W]` dims.
    pub fn dims(&self) -> [usize; 5] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }

    /// Stacks single clips along the batch axis.
    pub fn stack(clips: &[&VideoTensor<T>]) -> Result<Self> {
        let first = clips.first().ok_or_else(|| input_err!("stack: no clips"))?;
        let [_, c, t, h, w] = first.dims();
        let mut data = Vec::with_capacity(clips.len() * c * t * h * w);
        let mut n = 0;
        for clip in clips {
            let [cn, cc, ct, chh, cw] = clip.dims();
            if (cc, ct, chh, cw) != (c, t, h, w) {
                return Err(dim_err!(
                    "stack: clip dims {:?} differ from {:?}",
                    clip.dims(),
                    first.dims()
                ));
            }
            data.extend_from_slice(clip.data.data());
            n += cn;
        }
        Self::new(Tensor::new(vec![n, c, t, h, w], data)?, first.sampling)
    }

    /// Mirrors every frame left-to-right.
    pub fn hflip(&self) -> Self {
        let [n, c, t, h, w] = self.dims();
        let mut out = self.data.clone();
        let src = self.data.data();
        let dst = out.data_mut();
        for row in 0..n * c * t * h {
            for x in 0..w {
                dst[row * w + x] = src[row * w + (w - 1 - x)];
            }
        }
        Self {
            data: out,
            sampling: self.sampling,
        }
    }
}

/// Patch geometry `(pt, ph, pw)`.
pub type Patch = [usize; 3];

/// Token grid `(T', Gh, Gw)` for a clip of `(T, H, W)`.
pub fn token_grid(frames: usize, height: usize, width: usize, patch: Patch) -> Result<[usize; 3]> {
    let dims = [frames, height, width];
    if patch.contains(&0) {
        return Err(cfg_err!("patch {patch:?} has a zero side"));
    }
    for a in 0..3 {
        if !dims[a].is_multiple_of(patch[a]) {
            return Err(dim_err!("clip {dims:?} not divisible by patch {patch:?}"));
        }
    }
    Ok([frames / patch[0], height / patch[1], width / patch[2]])
}

/// Token map `[N, T', Gh, Gw, C]` held outside a tape.
#[derive(Debug, Clone)]
pub struct TokenMap<T> {
    pub data: Tensor<T>,
    pub patch: Patch,
}

impl<T: Scalar> TokenMap<T> {
    pub fn new(data: Tensor<T>, patch: Patch) -> Result<Self> {
        if data.rank() != 5 {
            return Err(dim_err!(
                "token map must be [N, T', Gh, Gw, C], got {:?}",
                data.shape()
            ));
        }
        Ok(Self { data, patch })
    }

    /// `(N, T', Gh, Gw, C)`.
    pub fn dims(&self) -> [usize; 5] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }

    pub fn channels(&self) -> usize {
        self.dims()[4]
    }

    /// `[N, T', Gh * Gw, C]`, the per-frame spatial sequence view.
    pub fn frame_sequence_view(&self) -> Tensor<T> {
        let [n, t, gh, gw, c] = self.dims();
        self.data
            .reshape(&[n, t, gh * gw, c])
            .expect("same element count")
    }

    pub fn from_frame_sequence_view(
        view: &Tensor<T>,
        gh: usize,
        gw: usize,
        patch: Patch,
    ) -> Result<Self> {
        let s = view.shape();
        if s.len() != 4 || s[2] != gh * gw {
            return Err(dim_err!("view {s:?} does not match grid {gh}x{gw}"));
        }
        Self::new(view.reshape(&[s[0], s[1], gh, gw, s[3]])?, patch)
    }
}

/// Patch embedding: a conv3d with kernel == stride == patch, followed by a
/// permute to channels-last. `clip: [N, 3, T, H, W]`, `weight: [C, 3, pt, ph, pw]`.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    clip: Var,
    weight: Var,
    bias: Option<Var>,
    patch: Patch,
) -> Result<Var> {
    let s = tape.shape(clip).to_vec();
    if s.len() != 5 {
        return Err(dim_err!("patch_embed: clip must be rank 5, got {s:?}"));
    }
    token_grid(s[2], s[3], s[4], patch)?;
    let ws = tape.shape(weight);
    if ws[2..] != patch[..] {
        return Err(dim_err!(
            "patch_embed: weight {ws:?} does not match patch {patch:?}"
        ));
    }
    let y = tape.conv3d(clip, weight, bias, patch, Padding::Valid, 1)?;
    tape.permute(y, &[0, 2, 3, 4, 1])
}

/// Channel split of the separable encoding: `(d_t, d_h, d_w)`.
pub fn positional_split(c: usize) -> (usize, usize, usize) {
    let d_hw = 2 * (c / 6);
    (c - 2 * d_hw, d_hw, d_hw)
}

/// Fixed separable sinusoids `[T', Gh, Gw, C]`: the first `d_t` channels
/// encode the frame index, the next `d_h` the row, the last `d_w` the column.
pub fn positional_encoding<T: Scalar>(grid: [usize; 3], c: usize) -> Tensor<T> {
    let [gt, gh, gw] = grid;
    let (dt, dh, dw) = positional_split(c);
    let sinusoid = |pos: usize, i: usize, d: usize| -> f64 {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 * freq;
        if i.is_multiple_of(2) {
            a.sin()
        } else {
            a.cos()
        }
    };
    let mut data = Vec::with_capacity(gt * gh * gw * c);
    for t in 0..gt {
        for h in 0..gh {
            for w in 0..gw {
                for ch in 0..c {
                    let v = if ch < dt {
                        sinusoid(t, ch, dt)
                    } else if ch < dt + dh {
                        sinusoid(h, ch - dt, dh)
                    } else {
                        sinusoid(w, ch - dt - dh, dw)
                    };
                    data.push(T::of(v));
                }
            }
        }
    }
    Tensor::new(vec![gt, gh, gw, c], data).expect("shape")
}

/// Adds the fixed encoding to every batch entry of `tokens: [N, T', Gh, Gw, C]`.
pub fn add_positional<T: Scalar>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 5 {
        return Err(dim_err!("add_positional: expected rank 5, got {s:?}"));
    }
    let pe = positional_encoding::<T>([s[1], s[2], s[3]], s[4]);
    let mut rep = Vec::with_capacity(pe.len() * s[0]);
    for _ in 0..s[0] {
        rep.extend_from_slice(pe.data());
    }
    let pe = tape.constant(Tensor::new(s, rep)?);
    tape.add(tokens, pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        assert_eq!(token_grid(16, 224, 224, [2, 16, 16]).unwrap(), [8, 14, 14]);
        assert_eq!(token_grid(8, 32, 32, [2, 8, 8]).unwrap(), [4, 4, 4]);
        assert!(matches!(
            token_grid(8, 30, 32, [2, 8, 8]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn clip_roundtrip_and_header() {
        let mut clip = RawClip::new(4, 2, 3, 3);
        clip.pixels
            .iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p = (i * 7) as u8);
        let mut buf = Vec::new();
        clip.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"WVF1");
        assert_eq!(&buf[4..6], &4u16.to_le_bytes());
        assert_eq!(buf[10], 3);
        assert_eq!(buf.len(), 11 + 4 * 2 * 3 * 3);
        assert_eq!(RawClip::read_from(&buf[..]).unwrap(), clip);
    }

    #[test]
    fn sampling_is_centered() {
        let clip = RawClip::new(24, 1, 1, 3);
        let idx = clip
            .sample_indices(SamplingSpec::new(8, 2).unwrap())
            .unwrap();
        assert_eq!(idx, vec![4, 6, 8, 10, 12, 14, 16, 18]);
        assert!(clip
            .sample_indices(SamplingSpec::new(16, 2).unwrap())
            .is_err());
        assert_eq!(clip.keyframe(), 12);
    }

    #[test]
    fn normalization_range() {
        let mut clip = RawClip::new(2, 2, 2, 3);
        clip.pixels
            .iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p = if i % 2 == 0 { 0 } else { 255 });
        let v = clip
            .to_video::<f32>(SamplingSpec::new(2, 1).unwrap(), &Normalization::default())
            .unwrap();
        assert!(v.data.data().iter().all(|x| (-3.0..=3.0).contains(x)));
    }

    #[test]
    fn positional_bounds_and_axes() {
        let pe = positional_encoding::<f64>([4, 4, 4], 16);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        let (dt, dh, _) = positional_split(16);
        let at = |t: usize, h: usize, w: usize, c: usize| pe.data()[((t * 4 + h) * 4 + w) * 16 + c];
        // Time channels ignore (h, w); row channels ignore (t, w); column channels ignore (t, h).
        for t in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    for c in 0..16 {
                        let v = at(t, h, w, c);
                        if c < dt {
                            assert_eq!(v, at(t, 0, 0, c));
                        } else if c < dt + dh {
                            assert_eq!(v, at(0, h, 0, c));
                        } else {
                            assert_eq!(v, at(0, 0, w, c));
                        }
                    }
                }
            }
        }
        assert_eq!(pe, positional_encoding::<f64>([4, 4, 4], 16));
    }

    #[test]
    fn zero_tokens_yield_encoding() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 4, 4, 4, 16]));
        let y = add_positional(&mut tape, z).unwrap();
        assert_eq!(
            tape.value(y).data(),
            positional_encoding::<f64>([4, 4, 4], 16).data()
        );
    }
}
