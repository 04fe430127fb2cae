//! Compiling light signals into three-channel PWM event schedules.
//!
//! Every signal index becomes one hold slot of `slot_us`. Within a slot a
//! channel with duty `d` switches on at 0 and off at `d * slot_us` rounded
//! to the timer grid. Consecutive full-on slots are joined without toggling.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::LightSignal;
use crate::error::{Error, Result};
use crate::image::CHANNELS;

pub const DEFAULT_SLOT_US: u32 = 120;
pub const DEFAULT_GRID_US: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Off,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwmEvent {
    pub offset_us: u32,
    pub channel: u8,
    pub level: Level,
}

impl PwmEvent {
    /// Canonical order: time, then off before on, then channel.
    fn key(&self) -> (u32, Level, u8) {
        (self.offset_us, self.level, self.channel)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwmSlot {
    /// Channels that stay on from the previous slot without a new on event.
    pub carry_in: [bool; CHANNELS],
    pub events: Vec<PwmEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwmSchedule {
    pub slot_us: u32,
    pub grid_us: u32,
    pub slots: Vec<PwmSlot>,
}

fn check_timing(slot_us: u32, grid_us: u32) -> Result<()> {
    if grid_us == 0 || slot_us < grid_us {
        return Err(Error::MalformedSchedule(format!(
            "need slot_us >= grid_us > 0, got slot {slot_us}, grid {grid_us}"
        )));
    }
    if !slot_us.is_multiple_of(grid_us) {
        return Err(Error::MalformedSchedule(format!(
            "slot_us {slot_us} is not a multiple of grid_us {grid_us}"
        )));
    }
    Ok(())
}

/// Nearest multiple of `grid`, halves rounded away from zero.
pub fn quantize_to_grid(x: f64, grid: u32) -> u32 {
    let g = grid as f64;
    ((x / g).round() * g) as u32
}

/// On-time of a slot for `duty`, rounded to the grid and capped at the slot.
fn width(duty: f64, slot_us: u32, grid_us: u32) -> u32 {
    quantize_to_grid(duty * slot_us as f64, grid_us).min(slot_us)
}

pub fn compile(signal: &LightSignal, slot_us: u32, grid_us: u32) -> Result<PwmSchedule> {
    compile_duties(signal.values(), signal.len(), slot_us, grid_us)
}

/// Compiles channel-major duties (`CHANNELS x len`).
pub fn compile_duties(duties: &[f64], len: usize, slot_us: u32, grid_us: u32) -> Result<PwmSchedule> {
    check_timing(slot_us, grid_us)?;
    if duties.len() != CHANNELS * len {
        return Err(Error::shape(format!("{} duties for {CHANNELS} x {len}", duties.len())));
    }
    if let Some(d) = duties.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::OutOfRange(format!("duty {d} outside [0, 1]")));
    }
    let widths: Vec<[u32; CHANNELS]> = (0..len)
        .map(|i| std::array::from_fn(|ch| width(duties[ch * len + i], slot_us, grid_us)))
        .collect();
    let full = |i: usize, ch: usize| widths[i][ch] == slot_us;
    let slots = (0..len)
        .map(|i| {
            let mut slot = PwmSlot::default();
            for ch in 0..CHANNELS {
                let w = widths[i][ch];
                if w == 0 {
                    continue;
                }
                let carried = i > 0 && full(i - 1, ch) && full(i, ch);
                slot.carry_in[ch] = carried;
                if !carried {
                    slot.events.push(PwmEvent {
                        offset_us: 0,
                        channel: ch as u8,
                        level: Level::On,
                    });
                }
                let carries_out = full(i, ch) && i + 1 < len && full(i + 1, ch);
                if !carries_out {
                    slot.events.push(PwmEvent {
                        offset_us: w,
                        channel: ch as u8,
                        level: Level::Off,
                    });
                }
            }
            slot.events.sort_by_key(PwmEvent::key);
            slot
        })
        .collect();
    Ok(PwmSchedule { slot_us, grid_us, slots })
}

impl PwmSchedule {
    pub fn period_us(&self) -> u64 {
        self.slot_us as u64 * self.slots.len() as u64
    }

    pub fn event_count(&self) -> usize {
        self.slots.iter().map(|s| s.events.len()).sum()
    }

    /// Checks ordering, grid alignment, toggle budget and on/off pairing.
    pub fn validate(&self) -> Result<()> {
        check_timing(self.slot_us, self.grid_us)?;
        let bad = |i: usize, msg: String| Err(Error::MalformedSchedule(format!("slot {i}: {msg}")));
        let mut on_at_end = [false; CHANNELS];
        for (i, slot) in self.slots.iter().enumerate() {
            for ch in 0..CHANNELS {
                if slot.carry_in[ch] && !on_at_end[ch] {
                    return bad(i, format!("channel {ch} carried in but was off"));
                }
                if !slot.carry_in[ch] && on_at_end[ch] {
                    return bad(i - 1, format!("channel {ch} still on at slot end"));
                }
            }
            if slot.events.windows(2).any(|w| w[0].key() >= w[1].key()) {
                return bad(i, "events out of order or duplicated".into());
            }
            let mut state = slot.carry_in;
            let mut toggles = [[0u8; 2]; CHANNELS];
            for e in &slot.events {
                let ch = e.channel as usize;
                if ch >= CHANNELS {
                    return bad(i, format!("channel {ch} out of range"));
                }
                if e.offset_us > self.slot_us || e.offset_us % self.grid_us != 0 {
                    return bad(i, format!("offset {} off grid or past slot end", e.offset_us));
                }
                let on = e.level == Level::On;
                if state[ch] == on {
                    return bad(i, format!("channel {ch} switched {:?} twice", e.level));
                }
                toggles[ch][on as usize] += 1;
                if toggles[ch][on as usize] > 1 {
                    return bad(i, format!("channel {ch} has more than one {:?} event", e.level));
                }
                state[ch] = on;
            }
            on_at_end = state;
        }
        if let Some(ch) = on_at_end.iter().position(|&on| on) {
            return Err(Error::MalformedSchedule(format!("channel {ch} still on at period end")));
        }
        Ok(())
    }

    /// Reconstructed duties (channel-major, `CHANNELS x slots`) from the
    /// on-time of every channel at 1 us resolution.
    pub fn simulate(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.slots.len();
        let mut out = vec![0.0; CHANNELS * n];
        for (i, slot) in self.slots.iter().enumerate() {
            let mut state = slot.carry_in;
            let mut next = 0;
            let mut on_time = [0u32; CHANNELS];
            for t in 0..self.slot_us {
                while next < slot.events.len() && slot.events[next].offset_us <= t {
                    let e = slot.events[next];
                    state[e.channel as usize] = e.level == Level::On;
                    next += 1;
                }
                for ch in 0..CHANNELS {
                    on_time[ch] += state[ch] as u32;
                }
            }
            for ch in 0..CHANNELS {
                out[ch * n + i] = on_time[ch] as f64 / self.slot_us as f64;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScheduleDoc {
            format: SCHEDULE_FORMAT.into(),
            version: SCHEDULE_VERSION,
            schedule: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScheduleDoc = serde_json::from_str(text)?;
        if doc.format != SCHEDULE_FORMAT || doc.version != SCHEDULE_VERSION {
            return Err(Error::Parse(format!(
                "unsupported schedule document {:?} v{}",
                doc.format, doc.version
            )));
        }
        doc.schedule.validate()?;
        Ok(doc.schedule)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

const SCHEDULE_FORMAT: &str = "stripelight-pwm-schedule";
const SCHEDULE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleDoc {
    format: String,
    version: u32,
    #[serde(flatten)]
    schedule: PwmSchedule,
}

const FIRMWARE_VERSION: u32 = 1;

fn c_array(out: &mut String, ty: &str, name: &str, values: &[u64]) {
    let _ = write!(out, "static const {ty} {name}[{}] = {{", values.len());
    for (i, v) in values.iter().enumerate() {
        if i % 16 == 0 {
            out.push_str("\n    ");
        } else {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
        if i + 1 < values.len() {
            out.push(',');
        }
    }
    if !values.is_empty() {
        out.push('\n');
    }
    out.push_str("};\n");
}

/// C header holding the schedule as integer arrays. Events sharing a time
/// and level are merged into one channel-mask write.
pub fn export_firmware(schedule: &PwmSchedule) -> String {
    let mut starts = vec![0u64];
    let mut carry = Vec::new();
    let (mut offsets, mut masks, mut levels) = (Vec::new(), Vec::new(), Vec::new());
    for slot in &schedule.slots {
        carry.push(slot.carry_in.iter().enumerate().map(|(ch, &c)| (c as u64) << ch).sum());
        let mut i = 0;
        while i < slot.events.len() {
            let e = slot.events[i];
            let mut mask = 0u64;
            while i < slot.events.len() && slot.events[i].offset_us == e.offset_us && slot.events[i].level == e.level {
                mask |= 1 << slot.events[i].channel;
                i += 1;
            }
            offsets.push(e.offset_us as u64);
            masks.push(mask);
            levels.push((e.level == Level::On) as u64);
        }
        starts.push(offsets.len() as u64);
    }
    let mut out = String::new();
    out.push_str("/* Generated by stripelight. Three-channel PWM schedule. */\n");
    out.push_str("#ifndef STRIPELIGHT_SCHEDULE_H\n#define STRIPELIGHT_SCHEDULE_H\n\n#include <stdint.h>\n\n");
    let _ = writeln!(out, "#define STRIPELIGHT_FORMAT_VERSION {FIRMWARE_VERSION}");
    let _ = writeln!(out, "#define STRIPELIGHT_SLOT_US {}", schedule.slot_us);
    let _ = writeln!(out, "#define STRIPELIGHT_GRID_US {}", schedule.grid_us);
    let _ = writeln!(out, "#define STRIPELIGHT_NUM_SLOTS {}", schedule.slots.len());
    let _ = writeln!(out, "#define STRIPELIGHT_PERIOD_US {}", schedule.period_us());
    let _ = writeln!(out, "#define STRIPELIGHT_NUM_WRITES {}\n", offsets.len());
    out.push_str("/* Writes of slot i are slot_start[i] .. slot_start[i + 1]. */\n");
    c_array(&mut out, "uint32_t", "stripelight_slot_start", &starts);
    out.push_str("/* Channel mask already on when the slot begins. */\n");
    c_array(&mut out, "uint8_t", "stripelight_slot_carry", &carry);
    out.push_str("/* Per write: microseconds from slot start, channel mask, 1 = on. */\n");
    c_array(&mut out, "uint32_t", "stripelight_write_offset_us", &offsets);
    c_array(&mut out, "uint8_t", "stripelight_write_mask", &masks);
    c_array(&mut out, "uint8_t", "stripelight_write_level", &levels);
    out.push_str("\n#endif\n");
    out
}

fn parse_define(text: &str, name: &str) -> Result<u64> {
    let key = format!("#define {name} ");
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix(&key))
        .ok_or_else(|| Error::Parse(format!("missing {name}")))?;
    line.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{name} is not an integer")))
}

fn parse_array(text: &str, name: &str) -> Result<Vec<u64>> {
    let start = text
        .find(&format!(" {name}["))
        .ok_or_else(|| Error::Parse(format!("missing array {name}")))?;
    let rest = &text[start..];
    let declared: usize = rest[name.len() + 2..]
        .split(']')
        .next()
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad length for {name}")))?;
    let open = rest.find('{').ok_or_else(|| Error::Parse(format!("{name} has no body")))?;
    let close = rest.find('}').ok_or_else(|| Error::Parse(format!("{name} is unterminated")))?;
    let values = rest[open + 1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Parse(format!("{name}: bad value {s:?}"))))
        .collect::<Result<Vec<u64>>>()?;
    if values.len() != declared {
        return Err(Error::Parse(format!("{name} declares {declared} values but holds {}", values.len())));
    }
    Ok(values)
}

/// Reads a header written by [`export_firmware`] back into a schedule.
pub fn parse_firmware(text: &str) -> Result<PwmSchedule> {
    let version = parse_define(text, "STRIPELIGHT_FORMAT_VERSION")?;
    if version != FIRMWARE_VERSION as u64 {
        return Err(Error::Parse(format!("unsupported firmware format version {version}")));
    }
    let narrow = |v: u64, what: &str| u32::try_from(v).map_err(|_| Error::Parse(format!("{what} too large")));
    let slot_us = narrow(parse_define(text, "STRIPELIGHT_SLOT_US")?, "slot")?;
    let grid_us = narrow(parse_define(text, "STRIPELIGHT_GRID_US")?, "grid")?;
    let n = parse_define(text, "STRIPELIGHT_NUM_SLOTS")? as usize;
    let starts = parse_array(text, "stripelight_slot_start")?;
    let carry = parse_array(text, "stripelight_slot_carry")?;
    let offsets = parse_array(text, "stripelight_write_offset_us")?;
    let masks = parse_array(text, "stripelight_write_mask")?;
    let levels = parse_array(text, "stripelight_write_level")?;
    if starts.len() != n + 1 || carry.len() != n || masks.len() != offsets.len() || levels.len() != offsets.len() {
        return Err(Error::Parse("array lengths disagree with the slot count".into()));
    }
    if starts[0] != 0 || starts[n] as usize != offsets.len() || starts.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Parse("slot_start is not a monotone index".into()));
    }
    let mut slots = Vec::with_capacity(n);
    for i in 0..n {
        if carry[i] >> CHANNELS != 0 {
            return Err(Error::Parse(format!("slot {i}: carry mask {} out of range", carry[i])));
        }
        let mut slot = PwmSlot {
            carry_in: std::array::from_fn(|ch| carry[i] >> ch & 1 == 1),
            events: Vec::new(),
        };
        for w in starts[i] as usize..starts[i + 1] as usize {
            if masks[w] == 0 || masks[w] >> CHANNELS != 0 || levels[w] > 1 {
                return Err(Error::Parse(format!("write {w}: bad mask or level")));
            }
            for ch in 0..CHANNELS {
                if masks[w] >> ch & 1 == 1 {
                    slot.events.push(PwmEvent {
                        offset_us: narrow(offsets[w], "offset")?,
                        channel: ch as u8,
                        level: if levels[w] == 1 { Level::On } else { Level::Off },
                    });
                }
            }
        }
        slots.push(slot);
    }
    let schedule = PwmSchedule { slot_us, grid_us, slots };
    schedule.validate()?;
    Ok(schedule)
}
