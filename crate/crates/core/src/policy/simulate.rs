//! Streaming decode simulation over a source that arrives in chunks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderCache, FrameSequence, Model, TokenSequence};

use super::decide::{Decider, EncoderSource, PolicyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "arg", rename_all = "UPPERCASE")]
pub enum Event {
    /// Source units requested by one read.
    Read(usize),
    /// Emitted token.
    Write(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub events: Vec<Event>,
    /// Source units consumed before each written token.
    pub delays: Vec<usize>,
    pub output: Vec<usize>,
    /// Attended position per `layer·H + head`, one entry per written token.
    #[serde(default)]
    pub positions: Vec<Vec<usize>>,
    /// Source length in the same units as `delays`.
    #[serde(default)]
    pub source_len: usize,
}

impl DecisionTrace {
    pub fn reads(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, Event::Read(_))).count()
    }

    pub fn writes(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, Event::Write(_))).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Checks the structural invariants of a finished decode.
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("decision trace: {m}")));
        if self.writes() != self.output.len() || self.delays.len() != self.output.len() {
            return bad("write count differs from output length");
        }
        if self.delays.windows(2).any(|w| w[0] > w[1]) {
            return bad("delays decrease");
        }
        if self.delays.iter().any(|&d| d == 0 || d > self.source_len) {
            return bad("delay outside (0, |x|]");
        }
        for head in &self.positions {
            if head.windows(2).any(|w| w[0] > w[1]) {
                return bad("attended position moved backwards");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// Extend cached causal encoder states with each read.
    #[default]
    CausalIncremental,
    /// Re-encode the whole received prefix after each read.
    ReencodePrefix,
}

/// Source stream for a decode.
#[derive(Clone, Copy, Debug)]
pub enum StreamInput<'s> {
    Speech(&'s FrameSequence),
    Text(&'s TokenSequence),
}

impl StreamInput<'_> {
    /// Length in source units (frames or tokens).
    pub fn len(&self) -> usize {
        match self {
            StreamInput::Speech(f) => f.len(),
            StreamInput::Text(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder source backed by a model reading a stream chunk by chunk. Each
/// read appends a READ event to `events`.
pub struct StreamingEncoder<'m> {
    model: &'m Model,
    input: StreamInput<'m>,
    mode: EncoderMode,
    step: usize,
    limit: usize,
    pub consumed: usize,
    cache: EncoderCache,
    states: Vec<f64>,
    rows: usize,
    pub events: Vec<Event>,
}

impl<'m> StreamingEncoder<'m> {
    pub fn new(model: &'m Model, input: StreamInput<'m>, cfg: &PolicyConfig, mode: EncoderMode) -> Result<Self> {
        cfg.validate()?;
        if input.is_empty() {
            return Err(Error::Input("empty source stream".into()));
        }
        if mode == EncoderMode::CausalIncremental && !model.cfg.causal_encoder {
            return Err(Error::Contract(
                "incremental encoding needs a causal encoder; use prefix re-encoding".into(),
            ));
        }
        let speech = matches!(input, StreamInput::Speech(_));
        Ok(StreamingEncoder {
            model,
            input,
            mode,
            step: cfg.step_frames,
            limit: cfg.max_source.map_or(input.len(), |m| m.min(input.len())),
            consumed: 0,
            cache: model.new_encoder_cache(speech),
            states: Vec::new(),
            rows: 0,
            events: Vec::new(),
        })
    }

    fn encode(&mut self) -> Result<()> {
        let n = self.consumed;
        match (self.mode, self.input) {
            (EncoderMode::CausalIncremental, StreamInput::Speech(f)) => {
                self.model.extend_speech(&mut self.cache, f, n)?;
                self.rows = self.cache.rows;
            }
            (EncoderMode::CausalIncremental, StreamInput::Text(t)) => {
                self.model.extend_text(&mut self.cache, t, n)?;
                self.rows = self.cache.rows;
            }
            (EncoderMode::ReencodePrefix, StreamInput::Speech(f)) => {
                let out = self.model.encode_speech_prefix(f, n)?;
                self.rows = out.valid_len;
                self.states = out.states.data;
            }
            (EncoderMode::ReencodePrefix, StreamInput::Text(t)) => {
                let out = self.model.encode_text_prefix(t, n)?;
                self.rows = out.valid_len;
                self.states = out.states.data;
            }
        }
        Ok(())
    }
}

impl EncoderSource for StreamingEncoder<'_> {
    fn available(&self) -> usize {
        self.rows
    }

    fn states(&self) -> &[f64] {
        match self.mode {
            EncoderMode::CausalIncremental => &self.cache.states,
            EncoderMode::ReencodePrefix => &self.states,
        }
    }

    fn read(&mut self) -> Result<bool> {
        if self.consumed >= self.limit {
            return Ok(false);
        }
        self.consumed = (self.consumed + self.step).min(self.limit);
        self.events.push(Event::Read(self.step));
        self.encode()?;
        Ok(true)
    }
}

/// Greedy simultaneous decode of `input`. Stops at EOS or after
/// `max_len` tokens (default: twice the source length in tokens, taking
/// two frames per token for speech).
pub fn simulate_decode(
    model: &Model,
    input: StreamInput,
    cfg: &PolicyConfig,
    mode: EncoderMode,
    max_len: Option<usize>,
) -> Result<DecisionTrace> {
    let mut source = StreamingEncoder::new(model, input, cfg, mode)?;
    let mut decider = Decider::new(cfg)?;
    let max_len = max_len.unwrap_or(match input {
        StreamInput::Speech(f) => f.len().div_ceil(2),
        StreamInput::Text(t) => 2 * t.len(),
    });
    let eos = model.cfg.eos();
    let bos = model.cfg.bos();
    let mut state = model.start_decoder(max_len + 1);
    let mut trace = DecisionTrace {
        positions: vec![Vec::new(); model.cfg.monotonic_heads()],
        source_len: source.limit,
        ..Default::default()
    };
    let mut prev = bos;
    while trace.output.len() < max_len {
        let step = model.decode_step(&mut state, prev, &mut source, &mut decider)?;
        let mut probs = step.probs;
        probs[bos] = f64::NEG_INFINITY;
        let token = argmax(&probs);
        if token == eos {
            break;
        }
        source.events.push(Event::Write(token));
        trace.output.push(token);
        trace.delays.push(source.consumed);
        for (slot, &j) in step.positions.iter().enumerate() {
            trace.positions[slot].push(j);
        }
        prev = token;
    }
    trace.events = source.events;
    Ok(trace)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
