//! Deterministic linear stand-in for a learned video autoencoder.
//!
//! Encoding block-averages s x s spatial patches and groups of r frames
//! (frame 0 stands alone, latent frame k >= 1 covers input frames
//! r(k-1)+1 ..= rk); the 3 RGB means land in latent channels 0..2 and the
//! remaining channels are zero. Decoding replicates nearest along both axes
//! and clamps to [0, 1]. Encode is exactly linear, so every loss-side
//! property is testable in closed form.

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

fn check_video_shape(shape: &[usize], s: usize, r: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::shape(format!("video must be (F, H, W, 3), got {shape:?}")));
    }
    let (f, h, w) = (shape[0], shape[1], shape[2]);
    if f == 0 || (f - 1) % r != 0 {
        return Err(Error::shape(format!("frame count {f} is not r*f' + 1 for temporal factor {r}")));
    }
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!("spatial dims {h}x{w} not divisible by factor {s}")));
    }
    Ok((f, h, w))
}

/// Encodes (r*f + 1, H, W, 3) video into an (f + 1, H/s, W/s, C) latent.
pub fn encode_latent(video: &Tensor, s: usize, r: usize, latent_channels: usize) -> Result<Tensor> {
    let (f_in, h, w) = check_video_shape(video.shape(), s, r)?;
    if latent_channels < 3 {
        return Err(Error::invalid(format!(
            "latent needs at least 3 channels for the RGB means, got {latent_channels}"
        )));
    }
    let (fo, ho, wo) = ((f_in - 1) / r + 1, h / s, w / s);
    let src = video.data();
    let mut data = vec![0.0f32; fo * ho * wo * latent_channels];
    for k in 0..fo {
        // Latent frame 0 averages only input frame 0; frame k >= 1 averages
        // the r input frames it replaces.
        let (lo, hi) = if k == 0 { (0, 0) } else { (r * (k - 1) + 1, r * k) };
        let group = (hi - lo + 1) as f64;
        for y in 0..ho {
            for x in 0..wo {
                let mut sums = [0.0f64; 3];
                for frame in lo..=hi {
                    for dy in 0..s {
                        for dx in 0..s {
                            let p = ((frame * h + y * s + dy) * w + x * s + dx) * 3;
                            for (c, sum) in sums.iter_mut().enumerate() {
                                *sum += src[p + c] as f64;
                            }
                        }
                    }
                }
                let scale = group * (s * s) as f64;
                let out = ((k * ho + y) * wo + x) * latent_channels;
                for c in 0..3 {
                    data[out + c] = (sums[c] / scale) as f32;
                }
            }
        }
    }
    Tensor::from_vec(&[fo, ho, wo, latent_channels], data)
}

/// Decodes an (f + 1, h, w, C) latent back to (r*f + 1, h*s, w*s, 3) video:
/// nearest spatial upsampling, temporal replication (output frame j >= 1
/// reads latent frame ceil(j/r)), first three channels, clamped to [0, 1].
pub fn decode_latent(latent: &Tensor, s: usize, r: usize) -> Result<Tensor> {
    let shape = latent.shape();
    if shape.len() != 4 || shape[3] < 3 {
        return Err(Error::shape(format!(
            "latent must be (F', h, w, C >= 3), got {shape:?}"
        )));
    }
    if s == 0 || r == 0 {
        return Err(Error::invalid("codec factors must be positive"));
    }
    let (fo, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if fo == 0 {
        return Err(Error::shape("latent has no frames".to_string()));
    }
    let f_out = (fo - 1) * r + 1;
    let src = latent.data();
    let mut data = Vec::with_capacity(f_out * h * s * w * s * 3);
    for j in 0..f_out {
        let k = if j == 0 { 0 } else { j.div_ceil(r) };
        for y in 0..h * s {
            for x in 0..w * s {
                let p = ((k * h + y / s) * w + x / s) * c;
                for ch in 0..3 {
                    data.push(src[p + ch].clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::from_vec(&[f_out, h * s, w * s, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::{sample_standard_normal, RngState};

    #[test]
    fn shape_contract_and_validation() {
        let video = Tensor::zeros(&[5, 8, 8, 3]);
        let latent = encode_latent(&video, 8, 4, 8).unwrap();
        assert_eq!(latent.shape(), &[2, 1, 1, 8]);
        let back = decode_latent(&latent, 8, 4).unwrap();
        assert_eq!(back.shape(), &[5, 8, 8, 3]);

        assert!(encode_latent(&Tensor::zeros(&[4, 8, 8, 3]), 8, 4, 8).is_err(), "frames");
        assert!(encode_latent(&Tensor::zeros(&[5, 9, 8, 3]), 8, 4, 8).is_err(), "height");
        assert!(encode_latent(&Tensor::zeros(&[5, 8, 8, 4]), 8, 4, 8).is_err(), "channels");
        assert!(encode_latent(&video, 8, 4, 2).is_err(), "too few latent channels");
        assert!(decode_latent(&Tensor::zeros(&[2, 1, 1, 2]), 8, 4).is_err());
    }

    #[test]
    fn constant_video_fills_rgb_means_only() {
        let video = Tensor::filled(&[9, 16, 16, 3], 0.6);
        let latent = encode_latent(&video, 8, 4, 8).unwrap();
        assert_eq!(latent.shape(), &[3, 2, 2, 8]);
        for px in latent.data().chunks_exact(8) {
            for c in 0..3 {
                assert!((px[c] - 0.6).abs() < 1e-7, "RGB mean carries the constant");
            }
            assert_eq!(&px[3..], &[0.0; 5], "lifted channels stay zero");
        }
        let black = decode_latent(&Tensor::zeros(&[3, 2, 2, 8]), 8, 4).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0), "zero latent decodes to black");
    }

    #[test]
    fn block_constant_video_is_a_codec_fixed_point() {
        // Constant within each 4x4 block and within each temporal group:
        // decode(encode(x)) reproduces the input bitwise (means of identical
        // values are exact, and [0,1] values pass the clamp untouched).
        let (s, r) = (4usize, 2usize);
        let (f, h, w) = (5usize, 8usize, 12usize);
        let mut rng = RngState::seed(14);
        let mut data = vec![0.0f32; f * h * w * 3];
        for group in 0..3 {
            let frames: Vec<usize> = match group {
                0 => vec![0],
                g => ((r * (g - 1) + 1)..=(r * g)).collect(),
            };
            for by in 0..h / s {
                for bx in 0..w / s {
                    let color = [
                        rng.uniform_f32(0.0, 1.0),
                        rng.uniform_f32(0.0, 1.0),
                        rng.uniform_f32(0.0, 1.0),
                    ];
                    for &frame in &frames {
                        for dy in 0..s {
                            for dx in 0..s {
                                let p = ((frame * h + by * s + dy) * w + bx * s + dx) * 3;
                                data[p..p + 3].copy_from_slice(&color);
                            }
                        }
                    }
                }
            }
        }
        let video = Tensor::from_vec(&[f, h, w, 3], data).unwrap();
        let roundtrip = decode_latent(&encode_latent(&video, s, r, 6).unwrap(), s, r).unwrap();
        assert_eq!(roundtrip.data(), video.data(), "fixed point is exact");
    }

    #[test]
    fn encode_is_linear() {
        let mut rng = RngState::seed(15);
        let x = sample_standard_normal(&[5, 8, 8, 3], &mut rng);
        let y = sample_standard_normal(&[5, 8, 8, 3], &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let mixed = Tensor::from_vec(
            &[5, 8, 8, 3],
            x.data().iter().zip(y.data()).map(|(&u, &v)| a * u + b * v).collect(),
        )
        .unwrap();
        let lhs = encode_latent(&mixed, 4, 4, 4).unwrap();
        let ex = encode_latent(&x, 4, 4, 4).unwrap();
        let ey = encode_latent(&y, 4, 4, 4).unwrap();
        for ((&l, &u), &v) in lhs.data().iter().zip(ex.data()).zip(ey.data()) {
            assert!((l - (a * u + b * v)).abs() < 1e-5, "encode(a x + b y) = a E(x) + b E(y)");
        }
    }

    #[test]
    fn decode_replicates_nearest_along_both_axes() {
        // Distinct value per latent cell; check a few exact pick positions.
        let mut latent = Tensor::zeros(&[2, 2, 2, 3]);
        for i in 0..latent.data().len() {
            latent.data_mut()[i] = (i as f32) / 100.0;
        }
        let video = decode_latent(&latent, 2, 3).unwrap();
        assert_eq!(video.shape(), &[4, 4, 4, 3]);
        let lat = |k: usize, y: usize, x: usize, c: usize| {
            latent.data()[((k * 2 + y) * 2 + x) * 3 + c]
        };
        let vid = |j: usize, y: usize, x: usize, c: usize| {
            video.data()[((j * 4 + y) * 4 + x) * 3 + c]
        };
        for c in 0..3 {
            assert_eq!(vid(0, 0, 0, c), lat(0, 0, 0, c), "frame 0 reads latent 0");
            assert_eq!(vid(0, 3, 3, c), lat(0, 1, 1, c), "bottom-right block");
            for j in 1..4 {
                // All of frames 1..3 replicate latent frame ceil(j/3) = 1.
                assert_eq!(vid(j, 1, 2, c), lat(1, 0, 1, c));
            }
        }
    }
}
