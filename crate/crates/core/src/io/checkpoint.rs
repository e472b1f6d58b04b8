//! Line-based checkpoint format.
//!
//! Every real is written as the 16 hex digits of its IEEE-754 bits, so a
//! restored run continues bit-for-bit. Lines appear in this fixed order:
//!
//! ```text
//! msrl-checkpoint
//! format_version 1
//! iteration <n>
//! dims <embed> <channels>
//! config <TrainerConfig JSON>
//! schedule <lambda1> <lambda2> <gamma>
//! adam <steps> <beta1> <beta2> <epsilon>
//! tensor <params|adam_m|adam_v> <block> <d0>x<d1>... <values, row-major>
//! rng <batch|selection|dropout> <seed, 64 hex digits> <stream> <word_pos>
//! pending <computed_at> <TripletBatch JSON>
//! priorities <group> <rows>x<cols> <one 0/1 per entry, row-major>
//! window <WindowStats JSON>
//! metrics <MetricsSnapshot JSON>
//! end
//! ```
//!
//! The three tensor sets each list all 19 parameter blocks; `priorities` has
//! one line per group and `metrics` one line per snapshot. A file without the
//! closing `end` is rejected.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::domain::TripletBatch;
use crate::encoders::{EncoderDims, EncoderParams};
use crate::error::{MsrlError, Result};
use crate::io::write_atomic;
use crate::metrics::MetricsSnapshot;
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngState;
use crate::scheduler::{PrioritySet, ScheduleState};
use crate::trainer::{PendingBatch, TrainRngs, TrainState, TrainerConfig, WindowStats};

pub const MAGIC: &str = "msrl-checkpoint";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const TENSOR_SETS: [&str; 3] = ["params", "adam_m", "adam_v"];
const RNG_NAMES: [&str; 3] = ["batch", "selection", "dropout"];

/// A resumable training state with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainerConfig,
    pub state: TrainState,
}

fn hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unhex(s: &str) -> Result<f64> {
    if s.len() != 16 {
        return Err(MsrlError::Parse(format!("bad real `{s}`")));
    }
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| MsrlError::Parse(format!("bad real `{s}`")))
}

fn push_tensors(out: &mut Vec<String>, set: &str, params: &EncoderParams) {
    for (name, block) in params.blocks() {
        let shape: Vec<String> = block.shape().iter().map(usize::to_string).collect();
        let values: Vec<String> = block.iter().map(|&x| hex(x)).collect();
        out.push(format!("tensor {set} {name} {} {}", shape.join("x"), values.join(" ")).trim_end().to_string());
    }
}

fn push_rng(out: &mut Vec<String>, name: &str, rng: &rand_chacha::ChaCha8Rng) {
    let s = RngState::capture(rng);
    let seed: String = s.seed.iter().map(|b| format!("{b:02x}")).collect();
    out.push(format!("rng {name} {seed} {} {}", s.stream, s.word_pos));
}

pub fn checkpoint_to_text(config: &TrainerConfig, state: &TrainState) -> Result<String> {
    let dims = state.params.dims();
    let mut out = vec![
        MAGIC.to_string(),
        format!("format_version {CHECKPOINT_FORMAT_VERSION}"),
        format!("iteration {}", state.iteration),
        format!("dims {} {}", dims.embed, dims.channels),
        format!("config {}", serde_json::to_string(config)?),
        format!("schedule {} {} {}", hex(state.schedule.lambda1()), hex(state.schedule.lambda2()), hex(state.schedule.gamma())),
    ];
    let a = &state.adam;
    out.push(format!("adam {} {} {} {}", a.steps, hex(a.config.beta1), hex(a.config.beta2), hex(a.config.epsilon)));
    for (set, params) in TENSOR_SETS.iter().zip([&state.params, &a.first, &a.second]) {
        push_tensors(&mut out, set, params);
    }
    for (name, rng) in RNG_NAMES.iter().zip([&state.rngs.batch, &state.rngs.selection, &state.rngs.dropout]) {
        push_rng(&mut out, name, rng);
    }
    out.push(format!("pending {} {}", state.pending.computed_at, serde_json::to_string(&state.pending.batch)?));
    let priorities = &state.pending.priorities;
    let (rows, cols) = priorities.shape();
    for g in 0..priorities.n_groups() {
        let bits: String = priorities.group(g).iter().map(|&s| if s { '1' } else { '0' }).collect();
        out.push(format!("priorities {g} {rows}x{cols} {bits}"));
    }
    out.push(format!("window {}", serde_json::to_string(&state.window)?));
    for m in &state.metrics {
        out.push(format!("metrics {}", serde_json::to_string(m)?));
    }
    out.push("end".to_string());
    let mut text = out.join("\n");
    text.push('\n');
    Ok(text)
}

/// Sequential reader over tagged lines.
struct Lines<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn next_raw(&mut self) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .map(|(k, l)| (k + 1, l))
            .ok_or_else(|| MsrlError::Parse("checkpoint truncated".into()))
    }

    /// The remainder of the next line after `tag `.
    fn expect(&mut self, tag: &str) -> Result<&'a str> {
        let (n, line) = self.next_raw()?;
        match line.split_once(' ') {
            Some((t, rest)) if t == tag => Ok(rest),
            _ if line == tag => Ok(""),
            _ => Err(MsrlError::Parse(format!("line {n}: expected `{tag}`"))),
        }
    }

    fn peek_tag(&mut self) -> Option<&'a str> {
        self.lines.peek().map(|(_, l)| l.split(' ').next().unwrap_or(""))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| MsrlError::Parse(format!("bad {what} `{s}`")))
}

fn fields<'a, const N: usize>(rest: &'a str, what: &str) -> Result<[&'a str; N]> {
    let parts: Vec<&str> = rest.split(' ').collect();
    parts.try_into().map_err(|_| MsrlError::Parse(format!("`{what}` expects {N} fields")))
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x').map(|d| parse_num(d, "shape")).collect()
}

fn read_tensors(lines: &mut Lines<'_>, set: &str, dims: EncoderDims) -> Result<EncoderParams> {
    let mut params = EncoderParams::zeros(dims);
    for (name, mut block) in params.blocks_mut() {
        let rest = lines.expect("tensor")?;
        let mut parts = rest.split(' ');
        let (s, n, shape) = (parts.next(), parts.next(), parts.next());
        if s != Some(set) || n != Some(name) {
            return Err(MsrlError::Parse(format!("expected tensor {set} {name}")));
        }
        if parse_shape(shape.unwrap_or(""))? != block.shape() {
            return Err(MsrlError::Parse(format!("tensor {set} {name}: shape mismatch")));
        }
        let values: Vec<f64> = parts.map(unhex).collect::<Result<_>>()?;
        if values.len() != block.len() {
            return Err(MsrlError::Parse(format!("tensor {set} {name}: expected {} values, found {}", block.len(), values.len())));
        }
        block.iter_mut().zip(values).for_each(|(b, v)| *b = v);
    }
    Ok(params)
}

fn read_rng(lines: &mut Lines<'_>, name: &str) -> Result<rand_chacha::ChaCha8Rng> {
    let [n, seed, stream, word_pos] = fields::<4>(lines.expect("rng")?, "rng")?;
    if n != name || seed.len() != 64 {
        return Err(MsrlError::Parse(format!("expected rng {name}")));
    }
    let mut bytes = [0u8; 32];
    for (k, b) in bytes.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed[2 * k..2 * k + 2], 16).map_err(|_| MsrlError::Parse(format!("rng {name}: bad seed")))?;
    }
    Ok(RngState { seed: bytes, stream: parse_num(stream, "stream")?, word_pos: parse_num(word_pos, "word_pos")? }.restore())
}

pub fn checkpoint_from_text(text: &str) -> Result<Checkpoint> {
    let mut lines = Lines { lines: text.lines().enumerate().peekable() };
    let (_, magic) = lines.next_raw()?;
    if magic != MAGIC {
        return Err(MsrlError::Parse("not a checkpoint file".into()));
    }
    let version = lines.expect("format_version")?;
    if version != CHECKPOINT_FORMAT_VERSION.to_string() {
        return Err(MsrlError::Version { found: version.to_string(), expected: CHECKPOINT_FORMAT_VERSION.to_string() });
    }
    let iteration: usize = parse_num(lines.expect("iteration")?, "iteration")?;
    let [embed, channels] = fields::<2>(lines.expect("dims")?, "dims")?;
    let dims = EncoderDims { embed: parse_num(embed, "dims")?, channels: parse_num(channels, "dims")? };
    let config: TrainerConfig = serde_json::from_str(lines.expect("config")?)?;
    let [l1, l2, g] = fields::<3>(lines.expect("schedule")?, "schedule")?;
    let schedule = ScheduleState::with_values(unhex(l1)?, unhex(l2)?, unhex(g)?, config.schedule)?;
    let [steps, b1, b2, eps] = fields::<4>(lines.expect("adam")?, "adam")?;
    let adam_config = AdamConfig { beta1: unhex(b1)?, beta2: unhex(b2)?, epsilon: unhex(eps)? };
    let params = read_tensors(&mut lines, TENSOR_SETS[0], dims)?;
    let first = read_tensors(&mut lines, TENSOR_SETS[1], dims)?;
    let second = read_tensors(&mut lines, TENSOR_SETS[2], dims)?;
    let adam = Adam { config: adam_config, first, second, steps: parse_num(steps, "adam steps")? };
    let rngs = TrainRngs {
        batch: read_rng(&mut lines, RNG_NAMES[0])?,
        selection: read_rng(&mut lines, RNG_NAMES[1])?,
        dropout: read_rng(&mut lines, RNG_NAMES[2])?,
    };
    let (computed_at, batch_json) =
        lines.expect("pending")?.split_once(' ').ok_or_else(|| MsrlError::Parse("bad pending line".into()))?;
    let batch: TripletBatch = serde_json::from_str(batch_json)?;
    let mut selected = Vec::new();
    while lines.peek_tag() == Some("priorities") {
        let [g, shape, bits] = fields::<3>(lines.expect("priorities")?, "priorities")?;
        if parse_num::<usize>(g, "group")? != selected.len() {
            return Err(MsrlError::Parse(format!("priorities for group {g} out of order")));
        }
        let shape = parse_shape(shape)?;
        if shape != [batch.anchors.len(), batch.n_negatives()] || bits.len() != shape[0] * shape[1] {
            return Err(MsrlError::Parse(format!("priorities for group {g} do not match the batch")));
        }
        let flags: Vec<bool> = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(MsrlError::Parse(format!("priorities for group {g}: bad flag `{c}`"))),
            })
            .collect::<Result<_>>()?;
        selected.push(Array2::from_shape_vec((shape[0], shape[1]), flags).map_err(|e| MsrlError::Parse(e.to_string()))?);
    }
    let priorities = PrioritySet::from_selected(selected)?;
    let window: WindowStats = serde_json::from_str(lines.expect("window")?)?;
    let mut metrics = Vec::new();
    while lines.peek_tag() == Some("metrics") {
        metrics.push(serde_json::from_str::<MetricsSnapshot>(lines.expect("metrics")?)?);
    }
    lines.expect("end")?;
    if lines.next_raw().is_ok() {
        return Err(MsrlError::Parse("trailing content after `end`".into()));
    }
    if window.selected_per_group.len() != priorities.n_groups() {
        return Err(MsrlError::Parse("window and priorities disagree on the group count".into()));
    }
    let pending = PendingBatch { batch, priorities, computed_at: parse_num(computed_at, "computed_at")? };
    let state = TrainState { iteration, params, adam, schedule, pending, rngs, window, metrics };
    Ok(Checkpoint { config, state })
}

pub fn save_checkpoint(config: &TrainerConfig, state: &TrainState, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(MsrlError::validation("empty checkpoint path"));
    }
    write_atomic(path, &checkpoint_to_text(config, state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if path.as_os_str().is_empty() {
        return Err(MsrlError::validation("empty checkpoint path"));
    }
    checkpoint_from_text(&fs::read_to_string(path)?)
}
