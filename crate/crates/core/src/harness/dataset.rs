//! Seeded synthetic inputs and event-file loading.
//!
//! Synthetic images are oriented stripe patterns whose orientation and
//! frequency depend on the class, plus per-pixel noise. Synthetic event
//! streams sweep a bar across the sensor with a class-dependent direction.
//! Both are pure functions of `(seed, sample index)`.

use std::path::{Path, PathBuf};

use crate::rng::SeededRng;
use crate::snn::{Event, EventStream, SampleInput, SnnError, StaticImage};
use crate::tensor::Shape;

const IMAGE_STREAM: u64 = 0x1A6E;
const EVENT_STREAM: u64 = 0xE7E7;
const LABEL_STREAM: u64 = 0x1ABE1;

/// Length of a synthetic recording.
pub const SYNTHETIC_DURATION_US: u64 = 100_000;

pub fn synthetic_label(seed: u64, sample: usize, classes: usize) -> usize {
    SeededRng::derive_path(seed, &[LABEL_STREAM, sample as u64]).below(classes.max(1) as u64) as usize
}

pub fn synthetic_image(shape: &Shape, seed: u64, sample: usize, classes: usize) -> StaticImage {
    let (c, h, w) = shape.chw().expect("image shape");
    let label = synthetic_label(seed, sample, classes);
    let mut rng = SeededRng::derive_path(seed, &[IMAGE_STREAM, sample as u64]);
    let angle = std::f64::consts::PI * label as f64 / classes.max(1) as f64;
    let freq = 0.15 + 0.05 * (label % 3) as f64;
    let (dx, dy) = (angle.cos() * freq, angle.sin() * freq);
    let phase = rng.next_f64() * std::f64::consts::TAU;
    let mut pixels = Vec::with_capacity(shape.numel());
    for ch in 0..c {
        let tint = 0.8 + 0.2 * ((ch + label) % 2) as f64;
        for y in 0..h {
            for x in 0..w {
                let s = (x as f64 * dx + y as f64 * dy) * std::f64::consts::TAU + phase;
                let v = 0.5 + 0.35 * s.sin() * tint + 0.3 * (rng.next_f64() - 0.5);
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    StaticImage::new(shape.clone(), pixels).expect("pixels in range")
}

/// Bar sweeping across a `(2, H, W)` sensor; polarity 1 on the leading edge,
/// 0 on the trailing edge, plus sparse background noise.
pub fn synthetic_events(sensor: &Shape, seed: u64, sample: usize, classes: usize) -> EventStream {
    let (_, h, w) = sensor.chw().expect("sensor shape");
    let label = synthetic_label(seed, sample, classes);
    let mut rng = SeededRng::derive_path(seed, &[EVENT_STREAM, sample as u64]);
    let horizontal = label % 2 == 0;
    let reverse = (label / 2) % 2 == 1;
    let span = if horizontal { w } else { h };
    let across = if horizontal { h } else { w };
    let step_us = SYNTHETIC_DURATION_US / span as u64;
    let mut events = Vec::new();
    for k in 0..span {
        let pos = if reverse { span - 1 - k } else { k };
        let t0 = k as u64 * step_us;
        for a in 0..across {
            if rng.next_f32() < 0.7 {
                let (x, y) = if horizontal { (pos, a) } else { (a, pos) };
                let dt = rng.below(step_us.max(1));
                events.push(Event {
                    t_us: t0 + dt,
                    x: x as u16,
                    y: y as u16,
                    polarity: 1,
                });
                if pos >= 2 || span - pos > 2 {
                    let back = if reverse { pos + 2 } else { pos.wrapping_sub(2) };
                    if back < span {
                        let (bx, by) = if horizontal { (back, a) } else { (a, back) };
                        events.push(Event {
                            t_us: t0 + dt,
                            x: bx as u16,
                            y: by as u16,
                            polarity: 0,
                        });
                    }
                }
            }
        }
        let noise = rng.below(4) as usize + label % 3;
        for _ in 0..noise {
            events.push(Event {
                t_us: t0 + rng.below(step_us.max(1)),
                x: rng.below(w as u64) as u16,
                y: rng.below(h as u64) as u16,
                polarity: rng.below(2) as u8,
            });
        }
    }
    events.sort_by_key(|e| e.t_us);
    EventStream {
        events,
        duration_us: Some(SYNTHETIC_DURATION_US),
    }
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum InputSource {
    SyntheticImages,
    SyntheticEvents,
    /// One recording per file.
    EventFiles(Vec<PathBuf>),
}

impl InputSource {
    /// A single event file, or every regular file in a directory (sorted).
    pub fn event_path(path: &Path) -> Result<Self, SnnError> {
        let io = |e: std::io::Error| SnnError::Input(format!("{}: {e}", path.display()));
        if path.is_dir() {
            let mut files = Vec::new();
            for entry in std::fs::read_dir(path).map_err(io)? {
                let p = entry.map_err(io)?.path();
                if p.is_file() {
                    files.push(p);
                }
            }
            files.sort();
            if files.is_empty() {
                return Err(SnnError::Input(format!("no event files in {}", path.display())));
            }
            Ok(InputSource::EventFiles(files))
        } else if path.is_file() {
            Ok(InputSource::EventFiles(vec![path.to_path_buf()]))
        } else {
            Err(SnnError::Input(format!("{} does not exist", path.display())))
        }
    }

    pub fn is_events(&self) -> bool {
        !matches!(self, InputSource::SyntheticImages)
    }

    /// Sample `i` and its label (labels of event files are unknown).
    pub fn sample(
        &self,
        shape: &Shape,
        seed: u64,
        i: usize,
        classes: usize,
    ) -> Result<(SampleInput, Option<usize>), SnnError> {
        Ok(match self {
            InputSource::SyntheticImages => (
                SampleInput::StaticImage(synthetic_image(shape, seed, i, classes)),
                Some(synthetic_label(seed, i, classes)),
            ),
            InputSource::SyntheticEvents => (
                SampleInput::EventStream(synthetic_events(shape, seed, i, classes)),
                Some(synthetic_label(seed, i, classes)),
            ),
            InputSource::EventFiles(files) => {
                let f = &files[i % files.len()];
                (SampleInput::EventStream(EventStream::load(f)?), None)
            }
        })
    }

    pub fn describe(&self) -> String {
        match self {
            InputSource::SyntheticImages => "synthetic-images".into(),
            InputSource::SyntheticEvents => "synthetic-events".into(),
            InputSource::EventFiles(f) => format!("event-file({} files)", f.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::event_bin;
    use crate::tensor::shape;

    #[test]
    fn images_are_reproducible_and_in_range() {
        let s = shape(&[3, 32, 32]);
        let a = synthetic_image(&s, 7, 3, 10);
        assert_eq!(a, synthetic_image(&s, 7, 3, 10));
        assert_ne!(a, synthetic_image(&s, 7, 4, 10));
        let mean: f32 = a.pixels().iter().sum::<f32>() / a.pixels().len() as f32;
        assert!((0.3..0.7).contains(&mean), "{mean}");
    }

    #[test]
    fn events_bin_cleanly() {
        let s = shape(&[2, 16, 16]);
        for i in 0..20 {
            let ev = synthetic_events(&s, 1, i, 10);
            assert_eq!(ev, synthetic_events(&s, 1, i, 10));
            let frames = event_bin(&ev, 4, &s).unwrap();
            assert!(frames.iter().all(|f| f.count_ones() > 0));
        }
    }

    #[test]
    fn event_directory() {
        let dir = std::env::temp_dir().join(format!("spikesplit-ev-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("b.txt"), "0 0 0 1\n").unwrap();
        std::fs::write(dir.join("a.txt"), "0 1 1 0\n").unwrap();
        let src = InputSource::event_path(&dir).unwrap();
        let (first, label) = src.sample(&shape(&[2, 4, 4]), 0, 0, 10).unwrap();
        assert_eq!(label, None);
        match first {
            SampleInput::EventStream(e) => assert_eq!(e.events[0].x, 1),
            _ => panic!(),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
