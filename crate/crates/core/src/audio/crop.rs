//! Fixed-width crops centred on a randomly chosen word.

use rand::Rng;

use super::manifest::Word;
use super::spectrogram::{Spectrogram, BANDS};
use crate::error::{Error, Result};

/// Value used for frames outside the clip.
pub const PAD_VALUE: f32 = -1.0;

/// A `128 × width` window, band-major so it can be fed as a one-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    /// First frame index of the window; negative when left-padded.
    pub start: isize,
    pub width: usize,
    pub center_sec: f64,
    /// `values[band * width + column]`.
    pub values: Vec<f32>,
}

impl Crop {
    pub fn end(&self) -> isize {
        self.start + self.width as isize
    }

    /// Columns that fall outside the source clip.
    pub fn padded_columns(&self, frames: usize) -> usize {
        (0..self.width as isize)
            .filter(|&j| {
                let f = self.start + j;
                f < 0 || f >= frames as isize
            })
            .count()
    }
}

pub fn check_width(width: usize) -> Result<()> {
    if width == 0 || !width.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "crop width {width} must be a positive multiple of 16"
        )));
    }
    Ok(())
}

/// Picks a uniform word, a uniform time inside it, and crops around that frame.
/// An empty transcript falls back to a uniform time over the whole clip.
pub fn word_centered_crop<R: Rng + ?Sized>(
    spec: &Spectrogram,
    words: &[Word],
    width: usize,
    rng: &mut R,
) -> Result<Crop> {
    check_width(width)?;
    let center_sec = if words.is_empty() {
        log::warn!(
            "utterance {} has an empty transcript; cropping at a uniform position",
            spec.utterance_id
        );
        rng.random_range(0.0..spec.frames as f64 * spec.frame_hop_sec)
    } else {
        let w = &words[rng.random_range(0..words.len())];
        w.start + rng.random::<f64>() * (w.end - w.start)
    };
    let center = (center_sec / spec.frame_hop_sec).floor() as isize;
    let mut crop = crop_at(spec, center, width);
    crop.center_sec = center_sec;
    Ok(crop)
}

/// Frames `[center - width/2, center + width/2)`.
pub fn crop_at(spec: &Spectrogram, center: isize, width: usize) -> Crop {
    let start = center - (width / 2) as isize;
    let mut values = vec![PAD_VALUE; BANDS * width];
    for j in 0..width {
        let f = start + j as isize;
        if f < 0 || f >= spec.frames as isize {
            continue;
        }
        for b in 0..BANDS {
            values[b * width + j] = spec.get(f as usize, b);
        }
    }
    Crop {
        start,
        width,
        center_sec: center as f64 * spec.frame_hop_sec,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::spectrogram::FRAME_HOP_SEC;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(frames: usize) -> Spectrogram {
        Spectrogram {
            frames,
            values: (0..frames * BANDS)
                .map(|i| (i / BANDS) as f32 / frames as f32)
                .collect(),
            frame_hop_sec: FRAME_HOP_SEC,
            utterance_id: "r".into(),
        }
    }

    fn word(s: f64, e: f64) -> Word {
        Word {
            token: "w".into(),
            start: s,
            end: e,
        }
    }

    #[test]
    fn interior_center() {
        let spec = ramp(300);
        let c = crop_at(&spec, 110, 64);
        assert_eq!((c.start, c.end()), (78, 142));
        assert_eq!(c.padded_columns(300), 0);
        assert_eq!(c.values[0], spec.get(78, 0));
        assert_eq!(c.values[63], spec.get(141, 0));
    }

    #[test]
    fn left_padding() {
        let spec = ramp(300);
        let c = crop_at(&spec, 5, 64);
        assert_eq!((c.start, c.end()), (-27, 37));
        assert_eq!(c.padded_columns(300), 27);
        assert!((0..27).all(|j| c.values[j] == PAD_VALUE));
        assert_eq!(c.values[27], spec.get(0, 0));
    }

    #[test]
    fn drawn_center_inside_word_frames() {
        let spec = ramp(300);
        let hop = FRAME_HOP_SEC;
        let words = [word(100.0 * hop, 121.0 * hop)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = word_centered_crop(&spec, &words, 64, &mut rng).unwrap();
            let center = c.start + 32;
            assert!((100..=120).contains(&center), "{center}");
        }
    }

    #[test]
    fn full_width_single_word_keeps_half_the_clip() {
        let spec = ramp(64);
        let words = [word(0.0, 64.0 * FRAME_HOP_SEC)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let c = word_centered_crop(&spec, &words, 64, &mut rng).unwrap();
            assert!(c.padded_columns(64) <= 32);
        }
    }

    #[test]
    fn empty_transcript_falls_back() {
        let spec = ramp(100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = word_centered_crop(&spec, &[], 64, &mut rng).unwrap();
        let center = c.start + 32;
        assert!((0..100).contains(&center));
    }

    #[test]
    fn invalid_width_rejected() {
        let spec = ramp(100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(word_centered_crop(&spec, &[], 60, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn crops_have_fixed_shape_and_are_reproducible(
            frames in 2usize..400,
            w_idx in 0usize..2,
            s in 0.0f64..1.0,
            len in 0.01f64..1.0,
            seed in any::<u64>(),
        ) {
            let width = [64, 128][w_idx];
            let spec = ramp(frames);
            let dur = frames as f64 * FRAME_HOP_SEC;
            let start = s * dur * 0.9;
            let end = (start + len * dur * 0.1).min(dur);
            prop_assume!(end > start);
            let words = [word(start, end)];
            let a = word_centered_crop(&spec, &words, width, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = word_centered_crop(&spec, &words, width, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a.values.len(), BANDS * width);
            prop_assert!(a.center_sec >= start && a.center_sec < end);
            prop_assert_eq!(a, b);
        }
    }
}
