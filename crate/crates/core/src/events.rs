//! Event data model, idealized event-camera simulation from frame
//! sequences, polarity accumulation over time windows, window sampling, and
//! event file I/O.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::log_image;

/// One brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t_us: u64,
    /// +1 for a brightness increase, -1 for a decrease.
    pub polarity: i8,
}

/// Events sorted by timestamp plus the sensor geometry and the contrast
/// threshold used at generation time.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: usize,
    pub height: usize,
    /// Contrast threshold A in log-brightness units.
    pub threshold: f64,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("sensor dimensions must be positive"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::invalid("contrast threshold must be positive"));
        }
        let mut last = 0u64;
        for (i, e) in self.events.iter().enumerate() {
            if e.polarity != 1 && e.polarity != -1 {
                return Err(Error::Parse {
                    record: i + 1,
                    message: format!("polarity must be ±1, got {}", e.polarity),
                });
            }
            if (e.x as usize) >= self.width || (e.y as usize) >= self.height {
                return Err(Error::Parse {
                    record: i + 1,
                    message: format!("event at ({}, {}) outside sensor", e.x, e.y),
                });
            }
            if e.t_us < last {
                return Err(Error::Parse {
                    record: i + 1,
                    message: "timestamps decrease".into(),
                });
            }
            last = e.t_us;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Per-pixel polarity sums over the half-open window `(t_start, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFrame {
    counts: Vec<i64>,
    width: usize,
    height: usize,
    pub t_start_us: u64,
    pub t_end_us: u64,
}

impl EventFrame {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> i64 {
        self.counts[y * self.width + x]
    }

    pub fn counts(&self) -> &[i64] {
        &self.counts
    }

    /// Counts as a float grid (for loss evaluation after unit scaling).
    pub fn to_grid(&self) -> Grid {
        Grid::from_vec(
            self.width,
            self.height,
            self.counts.iter().map(|&c| c as f64).collect(),
        )
        .expect("counts length matches dimensions")
    }
}

/// Sums event polarities per pixel over `(t_start, t_end]`. Events exactly
/// at `t_start` are excluded, events exactly at `t_end` included, so
/// consecutive windows partition the stream.
pub fn accumulate(
    stream: &EventStream,
    t_start_us: u64,
    t_end_us: u64,
    width: usize,
    height: usize,
) -> Result<EventFrame> {
    if t_start_us >= t_end_us {
        return Err(Error::invalid("window start must precede window end"));
    }
    let mut counts = vec![0i64; width * height];
    let lo = stream
        .events
        .partition_point(|e| e.t_us <= t_start_us);
    let hi = stream.events.partition_point(|e| e.t_us <= t_end_us);
    for e in &stream.events[lo..hi] {
        let (x, y) = (e.x as usize, e.y as usize);
        if x < width && y < height {
            counts[y * width + x] += e.polarity as i64;
        }
    }
    Ok(EventFrame {
        counts,
        width,
        height,
        t_start_us,
        t_end_us,
    })
}

/// Draws a window length uniformly from `[1, min(max_window, t_index)]`.
/// Frame 0 has no history, so `t_index` must be at least 1.
pub fn sample_window(t_index: usize, max_window: usize, rng: &mut impl Rng) -> Result<usize> {
    if max_window == 0 {
        return Err(Error::invalid("max window must be at least 1"));
    }
    if t_index == 0 {
        return Err(Error::invalid("no valid window before the first frame"));
    }
    let upper = max_window.min(t_index);
    Ok(rng.gen_range(1..=upper))
}

/// Idealized event-camera model: per pixel, log brightness is linearly
/// interpolated between consecutive frames and an event fires each time it
/// crosses the running reference by the contrast threshold. The reference
/// then moves by ±A. Times are rounded to whole microseconds and the output
/// is sorted by (t, y, x, p).
pub fn simulate_events(
    frames: &[Grid],
    timestamps_us: &[u64],
    threshold: f64,
    gamma: f64,
    log_eps: f64,
) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::invalid("need at least two frames"));
    }
    if frames.len() != timestamps_us.len() {
        return Err(Error::invalid("one timestamp per frame required"));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid("contrast threshold must be positive"));
    }
    let width = frames[0].width();
    let height = frames[0].height();
    for f in frames {
        if f.width() != width || f.height() != height {
            return Err(Error::invalid("frames must share one resolution"));
        }
    }
    for w in timestamps_us.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid("frame timestamps must strictly increase"));
        }
    }
    if width > u16::MAX as usize + 1 || height > u16::MAX as usize + 1 {
        return Err(Error::invalid("sensor dimensions exceed event coordinate range"));
    }

    let logs: Vec<Grid> = frames
        .iter()
        .map(|f| log_image(f, gamma, log_eps))
        .collect::<Result<_>>()?;

    let mut events = Vec::new();
    let mut reference: Vec<f64> = logs[0].values().to_vec();
    for seg in 0..logs.len() - 1 {
        let (la, lb) = (&logs[seg], &logs[seg + 1]);
        let (ta, tb) = (timestamps_us[seg] as f64, timestamps_us[seg + 1] as f64);
        for y in 0..height {
            for x in 0..width {
                let idx = y * width + x;
                let a = la.at(x, y);
                let b = lb.at(x, y);
                let span = b - a;
                if span == 0.0 {
                    continue;
                }
                let mut l_ref = reference[idx];
                let step = if span > 0.0 { threshold } else { -threshold };
                let polarity = if span > 0.0 { 1i8 } else { -1i8 };
                // Emit while the segment end still clears the next level.
                while (b - l_ref) * polarity as f64 >= threshold {
                    let target = l_ref + step;
                    let frac = (target - a) / span;
                    let t = ta + frac * (tb - ta);
                    events.push(Event {
                        x: x as u16,
                        y: y as u16,
                        t_us: t.round() as u64,
                        polarity,
                    });
                    l_ref = target;
                }
                reference[idx] = l_ref;
            }
        }
    }
    events.sort_by_key(|e| (e.t_us, e.y, e.x, e.polarity));
    let stream = EventStream {
        events,
        width,
        height,
        threshold,
    };
    stream.validate()?;
    Ok(stream)
}

// ---------------------------------------------------------------------------
// Binary format: fixed little-endian header followed by 14-byte records
// (t: u64, x: u16, y: u16, p: i8, pad: u8) until end of file.
//
//   magic  b"EVGS"
//   version u32 = 1
//   width   u32
//   height  u32
//   A       f64

const MAGIC: &[u8; 4] = b"EVGS";
const VERSION: u32 = 1;

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    stream.validate()?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(stream.width as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(stream.height as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&stream.threshold.to_le_bytes()).map_err(io_err)?;
    for e in &stream.events {
        w.write_all(&e.t_us.to_le_bytes()).map_err(io_err)?;
        w.write_all(&e.x.to_le_bytes()).map_err(io_err)?;
        w.write_all(&e.y.to_le_bytes()).map_err(io_err)?;
        w.write_all(&[e.polarity as u8, 0u8]).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_events(path: &Path) -> Result<EventStream> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);

    let mut header = [0u8; 4 + 4 + 4 + 4 + 8];
    r.read_exact(&mut header).map_err(|_| Error::Parse {
        record: 0,
        message: "truncated header".into(),
    })?;
    if &header[0..4] != MAGIC {
        return Err(Error::Parse {
            record: 0,
            message: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Parse {
            record: 0,
            message: format!("unsupported version {version}"),
        });
    }
    let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let threshold = f64::from_le_bytes(header[16..24].try_into().unwrap());

    let mut events = Vec::new();
    let mut record = [0u8; 14];
    let mut index = 0usize;
    loop {
        match r.read(&mut record[..1]) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) => {
                return Err(Error::Parse {
                    record: index + 1,
                    message: e.to_string(),
                })
            }
        }
        index += 1;
        r.read_exact(&mut record[1..]).map_err(|_| Error::Parse {
            record: index,
            message: "truncated record".into(),
        })?;
        let t_us = u64::from_le_bytes(record[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(record[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(record[10..12].try_into().unwrap());
        let polarity = record[12] as i8;
        events.push(Event {
            x,
            y,
            t_us,
            polarity,
        });
    }
    let stream = EventStream {
        events,
        width,
        height,
        threshold,
    };
    stream.validate()?;
    Ok(stream)
}

// ---------------------------------------------------------------------------
// CSV alternative for debugging:
//
//   # width=<w> height=<h> threshold=<A>
//   t_us,x,y,p
//   <t>,<x>,<y>,<±1>

pub fn write_events_csv(path: &Path, stream: &EventStream) -> Result<()> {
    stream.validate()?;
    let mut out = String::new();
    out.push_str(&format!(
        "# width={} height={} threshold={}\n",
        stream.width, stream.height, stream.threshold
    ));
    out.push_str("t_us,x,y,p\n");
    for e in &stream.events {
        out.push_str(&format!("{},{},{},{}\n", e.t_us, e.x, e.y, e.polarity));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_events_csv(path: &Path) -> Result<EventStream> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut width = None;
    let mut height = None;
    let mut threshold = None;
    let mut events = Vec::new();
    let mut data_index = 0usize;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    match k {
                        "width" => width = v.parse::<usize>().ok(),
                        "height" => height = v.parse::<usize>().ok(),
                        "threshold" => threshold = v.parse::<f64>().ok(),
                        _ => {}
                    }
                }
            }
            continue;
        }
        if line == "t_us,x,y,p" {
            continue;
        }
        data_index += 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                record: data_index,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<i64> {
            s.trim().parse::<i64>().map_err(|_| Error::Parse {
                record: data_index,
                message: format!("bad {what} '{s}'"),
            })
        };
        let t = parse(fields[0], "timestamp")?;
        let x = parse(fields[1], "x")?;
        let y = parse(fields[2], "y")?;
        let p = parse(fields[3], "polarity")?;
        if p != 1 && p != -1 {
            return Err(Error::Parse {
                record: data_index,
                message: format!("polarity must be ±1, got {p}"),
            });
        }
        if t < 0 || !(0..=u16::MAX as i64).contains(&x) || !(0..=u16::MAX as i64).contains(&y) {
            return Err(Error::Parse {
                record: data_index,
                message: "coordinate or timestamp out of range".into(),
            });
        }
        events.push(Event {
            x: x as u16,
            y: y as u16,
            t_us: t as u64,
            polarity: p as i8,
        });
    }
    let (width, height, threshold) = match (width, height, threshold) {
        (Some(w), Some(h), Some(a)) => (w, h, a),
        _ => {
            return Err(Error::Parse {
                record: 0,
                message: "missing width/height/threshold metadata".into(),
            })
        }
    };
    let stream = EventStream {
        events,
        width,
        height,
        threshold,
    };
    stream.validate()?;
    Ok(stream)
}
