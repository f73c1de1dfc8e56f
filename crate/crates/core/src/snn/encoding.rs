//! Turning inputs into per-timestep spike frames.
//!
//! Static images are rate coded: at every timestep each pixel fires
//! independently with probability equal to its intensity, using a generator
//! keyed by `(seed, timestep)`. Event streams are binned into `t_max`
//! equal-duration windows; a pixel is set in a window if any event lands there.

use std::path::Path;

use crate::rng::SeededRng;
use crate::tensor::{pack_bits, Shape, SpikeTensor};

use super::SnnError;

/// (C, H, W) intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct StaticImage {
    shape: Shape,
    pixels: Vec<f32>,
}

impl StaticImage {
    pub fn new(shape: Shape, pixels: Vec<f32>) -> Result<Self, SnnError> {
        if pixels.len() != shape.numel() {
            return Err(SnnError::Input(format!(
                "{} pixels for shape {shape}",
                pixels.len()
            )));
        }
        if let Some((i, p)) = pixels
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(SnnError::Input(format!("pixel {i} = {p} outside [0, 1]")));
        }
        Ok(Self { shape, pixels })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

/// A recording; timestamps are relative to the start of the recording.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EventStream {
    pub events: Vec<Event>,
    /// Recording length. When absent the window ends at the last event.
    pub duration_us: Option<u64>,
}

impl EventStream {
    pub fn new(events: Vec<Event>) -> Self {
        Self {
            events,
            duration_us: None,
        }
    }

    /// Parse `t_us x y polarity` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SnnError> {
        let mut events = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || SnnError::Input(format!("line {}: expected `t_us x y polarity`", lineno + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            events.push(Event {
                t_us: fields[0].parse().map_err(|_| bad())?,
                x: fields[1].parse().map_err(|_| bad())?,
                y: fields[2].parse().map_err(|_| bad())?,
                polarity: fields[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self::new(events))
    }

    pub fn load(path: &Path) -> Result<Self, SnnError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SnnError::Input(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# t_us x y polarity\n");
        for e in &self.events {
            s.push_str(&format!("{} {} {} {}\n", e.t_us, e.x, e.y, e.polarity));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleInput {
    StaticImage(StaticImage),
    EventStream(EventStream),
}

/// Bernoulli rate coding of one timestep.
pub fn rate_encode_image(img: &StaticImage, t: usize, seed: u64) -> Result<SpikeTensor, SnnError> {
    let mut rng = SeededRng::derive(seed, t as u64);
    let flags: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| u8::from(rng.next_f32() < p))
        .collect();
    Ok(SpikeTensor::from_packed(img.shape.clone(), pack_bits(&flags)?)?)
}

/// Rate coding with a caller-owned generator.
pub fn rate_encode(img: &StaticImage, rng: &mut SeededRng) -> Result<SpikeTensor, SnnError> {
    let flags: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| u8::from(rng.next_f32() < p))
        .collect();
    Ok(SpikeTensor::from_packed(img.shape.clone(), pack_bits(&flags)?)?)
}

/// Bin events into `t_max` frames of shape `sensor = (polarities, H, W)`.
pub fn event_bin(ev: &EventStream, t_max: usize, sensor: &Shape) -> Result<Vec<SpikeTensor>, SnnError> {
    if t_max == 0 {
        return Err(SnnError::Input("t_max must be at least 1".into()));
    }
    let (c, h, w) = sensor
        .chw()
        .filter(|_| sensor.rank() == 3)
        .ok_or_else(|| SnnError::Input(format!("sensor shape {sensor} is not (C,H,W)")))?;
    let plane = h * w;
    let mut frames = vec![vec![0u8; c * plane]; t_max];
    let Some(last) = ev.events.last() else {
        return frames
            .into_iter()
            .map(|f| Ok(SpikeTensor::from_flags(sensor.clone(), &f)?))
            .collect();
    };
    if let Some(i) = ev.events.windows(2).position(|p| p[1].t_us < p[0].t_us) {
        return Err(SnnError::Input(format!("events not time-sorted at index {}", i + 1)));
    }
    let duration = ev.duration_us.unwrap_or(last.t_us + 1).max(1);
    for (i, e) in ev.events.iter().enumerate() {
        if e.t_us >= duration {
            return Err(SnnError::Input(format!(
                "event {i} at {} us is past the {duration} us window",
                e.t_us
            )));
        }
        let (x, y, p) = (e.x as usize, e.y as usize, e.polarity as usize);
        if x >= w || y >= h || p >= c {
            return Err(SnnError::Input(format!(
                "event {i} at ({x},{y},p={p}) outside sensor {sensor}"
            )));
        }
        let bin = ((e.t_us as u128 * t_max as u128) / duration as u128) as usize;
        frames[bin][p * plane + y * w + x] = 1;
    }
    frames
        .into_iter()
        .map(|f| Ok(SpikeTensor::from_flags(sensor.clone(), &f)?))
        .collect()
}

/// Per-timestep input frames for one sample.
#[derive(Clone, Debug)]
pub enum FrameSource {
    Rate { image: StaticImage, seed: u64 },
    Binned(Vec<SpikeTensor>),
}

impl FrameSource {
    pub fn new(input: &SampleInput, t_max: usize, sensor: &Shape, seed: u64) -> Result<Self, SnnError> {
        match input {
            SampleInput::StaticImage(img) => {
                if img.shape() != sensor {
                    return Err(SnnError::Input(format!(
                        "image shape {} does not match network input {sensor}",
                        img.shape()
                    )));
                }
                Ok(FrameSource::Rate {
                    image: img.clone(),
                    seed,
                })
            }
            SampleInput::EventStream(ev) => Ok(FrameSource::Binned(event_bin(ev, t_max, sensor)?)),
        }
    }

    /// Frame for 1-based timestep `t`.
    pub fn frame(&self, t: usize) -> Result<SpikeTensor, SnnError> {
        match self {
            FrameSource::Rate { image, seed } => rate_encode_image(image, t, *seed),
            FrameSource::Binned(frames) => frames
                .get(t.wrapping_sub(1))
                .cloned()
                .ok_or_else(|| SnnError::Input(format!("no event frame for timestep {t}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::shape;

    fn img(value: f32) -> StaticImage {
        StaticImage::new(shape(&[1, 4, 4]), vec![value; 16]).unwrap()
    }

    #[test]
    fn rate_extremes() {
        assert_eq!(rate_encode_image(&img(0.0), 1, 5).unwrap().count_ones(), 0);
        assert_eq!(rate_encode_image(&img(1.0), 1, 5).unwrap().count_ones(), 16);
    }

    #[test]
    fn rate_is_reproducible_per_timestep() {
        let a = rate_encode_image(&img(0.5), 3, 42).unwrap();
        assert_eq!(a, rate_encode_image(&img(0.5), 3, 42).unwrap());
        let b = rate_encode_image(&img(0.5), 4, 42).unwrap();
        assert_ne!(a.packed(), b.packed());
    }

    #[test]
    fn rate_monte_carlo() {
        let im = StaticImage::new(shape(&[1, 1, 1]), vec![0.3]).unwrap();
        let mut rng = SeededRng::new(2024);
        let fired: usize = (0..10_000)
            .map(|_| rate_encode(&im, &mut rng).unwrap().count_ones())
            .sum();
        let rate = fired as f64 / 10_000.0;
        assert!((0.28..=0.32).contains(&rate), "rate {rate}");
    }

    #[test]
    fn out_of_range_pixel() {
        assert!(StaticImage::new(shape(&[1, 1, 2]), vec![0.5, 1.5]).is_err());
    }

    fn ev(t_us: u64, x: u16, y: u16, polarity: u8) -> Event {
        Event { t_us, x, y, polarity }
    }

    #[test]
    fn single_event_lands_in_first_frame() {
        let frames = event_bin(&EventStream::new(vec![ev(0, 1, 2, 1)]), 2, &shape(&[2, 4, 4])).unwrap();
        assert_eq!(frames[0].count_ones(), 1);
        assert!(frames[0].get(16 + 2 * 4 + 1));
        assert_eq!(frames[1].count_ones(), 0);
    }

    #[test]
    fn second_half_events_leave_first_frame_empty() {
        let mut stream = EventStream::new(vec![ev(600, 0, 0, 0), ev(900, 1, 1, 1)]);
        stream.duration_us = Some(1000);
        let frames = event_bin(&stream, 2, &shape(&[2, 2, 2])).unwrap();
        // interval membership: bin = floor(t * T / duration)
        for (i, e) in stream.events.iter().enumerate() {
            assert_eq!((e.t_us * 2 / 1000) as usize, 1, "event {i}");
        }
        assert_eq!(frames[0].count_ones(), 0);
        assert_eq!(frames[1].count_ones(), 2);
    }

    #[test]
    fn duplicates_are_or_ed() {
        let stream = EventStream::new(vec![ev(1, 0, 0, 0), ev(1, 0, 0, 0), ev(2, 0, 0, 0)]);
        let frames = event_bin(&stream, 1, &shape(&[2, 2, 2])).unwrap();
        assert_eq!(frames[0].count_ones(), 1);
    }

    #[test]
    fn empty_and_unsorted() {
        let frames = event_bin(&EventStream::default(), 3, &shape(&[2, 2, 2])).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|f| f.count_ones() == 0));
        let unsorted = EventStream::new(vec![ev(5, 0, 0, 0), ev(1, 0, 0, 0)]);
        assert!(event_bin(&unsorted, 2, &shape(&[2, 2, 2])).is_err());
        let outside = EventStream::new(vec![ev(5, 9, 0, 0)]);
        assert!(event_bin(&outside, 2, &shape(&[2, 2, 2])).is_err());
    }

    #[test]
    fn text_format() {
        let s = EventStream::parse("# header\n0 1 2 1\n10 3 3 0 # trailing\n\n").unwrap();
        assert_eq!(s.events, vec![ev(0, 1, 2, 1), ev(10, 3, 3, 0)]);
        assert_eq!(EventStream::parse(&s.to_text()).unwrap(), s);
        assert!(EventStream::parse("1 2 3").is_err());
    }
}
