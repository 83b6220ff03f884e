//! Versioned binary checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NTCK"
//! 4       4     format version, u32 LE (currently 1)
//! 8       32    SHA-256 of the resolved config
//! 40      8     step, u64 LE
//! 48      ...   sections, in order PARM MASK OPTS RNGS TRNS, each
//!               tag [4] | payload length u64 LE | payload
//! ```
//!
//! Strings are a u16 LE byte length followed by UTF-8. All floats are
//! little-endian. Payloads:
//!
//! * `PARM`: u32 count, then per tensor: name, u32 rank, rank × u64 dims,
//!   f32 values. Names are `<component>.<layer>.weight|bias`.
//! * `MASK`: u32 count, then per mask: name, u64 length, bits packed LSB
//!   first (`ceil(length/8)` bytes).
//! * `OPTS`: u32 components, then per component: name, u64 optimizer step
//!   count, u32 entries, then per entry: name, u64 length, u8 moment count
//!   (1 for SGD, 2 for Adam), moments × length f32.
//! * `RNGS`: u64 master seed, u32 count, then per stream: name, u64 key.
//!   Streams are addressed by (seed, key, component, layer, step), so no
//!   generator state needs to be stored.
//! * `TRNS`: f64 cumulative train FLOPs, f64 loss sum and u64 loss count
//!   since the last evaluation, u64 length + JSON of pending update records.

use std::path::Path;

use trails_core::model::component_label;
use trails_core::optim::{ComponentState, Slots};
use trails_core::rng::Purpose;
use trails_core::tensor::Tensor;
use trails_core::topology::UpdateRecord;
use trails_core::train::TrainState;

use crate::error::CliError;

pub const MAGIC: &[u8; 4] = b"NTCK";
pub const VERSION: u32 = 1;
pub const SECTIONS: [&[u8; 4]; 5] = [b"PARM", b"MASK", b"OPTS", b"RNGS", b"TRNS"];
const HEADER_LEN: usize = 48;

const STREAMS: [(&str, Purpose); 6] = [
    ("weight_init", Purpose::WeightInit),
    ("mask_init", Purpose::MaskInit),
    ("topology", Purpose::Topology),
    ("shuffle", Purpose::Shuffle),
    ("split", Purpose::Split),
    ("generate", Purpose::Generate),
];

#[derive(Debug, Clone, PartialEq)]
pub struct OptEntry {
    pub name: String,
    pub moments: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptComponent {
    pub name: String,
    pub steps: u64,
    pub entries: Vec<OptEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub step: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub masks: Vec<(String, Vec<bool>)>,
    pub optim: Vec<OptComponent>,
    pub seed: u64,
    pub streams: Vec<(String, u64)>,
    pub train_flops: f64,
    pub loss_sum: f64,
    pub loss_count: u64,
    pub pending_updates: Vec<UpdateRecord>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_state(st: &TrainState, config_hash: [u8; 32], seed: u64) -> Self {
        let mut params = Vec::new();
        let mut masks = Vec::new();
        let mut optim = Vec::new();
        for ((head, net), state) in st.model.components().into_iter().zip(&st.optim) {
            let comp = component_label(head);
            let mut entries = Vec::new();
            for (li, (layer, ls)) in net.layers.iter().zip(&state.layers).enumerate() {
                if let Some(w) = &layer.weight {
                    let name = format!("{comp}.{li}.weight");
                    params.push((name.clone(), w.shape().to_vec(), w.data().to_vec()));
                    masks.push((name, w.mask().to_vec()));
                }
                if let Some(b) = &layer.bias {
                    params.push((format!("{comp}.{li}.bias"), b.shape().to_vec(), b.data().to_vec()));
                }
                for (kind, slots) in [("weight", &ls.weight), ("bias", &ls.bias)] {
                    if let Some(s) = slots {
                        let mut moments = vec![s.first.clone()];
                        if !s.second.is_empty() {
                            moments.push(s.second.clone());
                        }
                        entries.push(OptEntry {
                            name: format!("{comp}.{li}.{kind}"),
                            moments,
                        });
                    }
                }
            }
            optim.push(OptComponent {
                name: comp,
                steps: state.steps,
                entries,
            });
        }
        Self {
            version: VERSION,
            config_hash,
            step: st.step as u64,
            params,
            masks,
            optim,
            seed,
            streams: STREAMS.iter().map(|(n, p)| (n.to_string(), *p as u64)).collect(),
            train_flops: st.train_flops,
            loss_sum: st.loss_sum,
            loss_count: st.loss_count as u64,
            pending_updates: st.pending_updates.clone(),
        }
    }

    /// Overwrite a freshly built state (same config) with the saved one.
    pub fn restore(&self, st: &mut TrainState) -> Result<(), CliError> {
        let mut params = self.params.iter();
        let mut masks = self.masks.iter();
        let comps: Vec<_> = st.model.components_mut().into_iter().zip(st.optim.iter_mut()).collect();
        if comps.len() != self.optim.len() {
            return Err(corrupt(format!(
                "optimizer state has {} components, model has {}",
                self.optim.len(),
                comps.len()
            )));
        }
        for (((head, net), state), saved) in comps.into_iter().zip(&self.optim) {
            let comp = component_label(head);
            if saved.name != comp {
                return Err(corrupt(format!("expected optimizer state for {comp}, found {}", saved.name)));
            }
            let mut fresh = ComponentState {
                layers: state.layers.clone(),
                steps: saved.steps,
            };
            let mut entries = saved.entries.iter();
            for (li, (layer, ls)) in net.layers.iter_mut().zip(fresh.layers.iter_mut()).enumerate() {
                if let Some(w) = layer.weight.as_mut() {
                    let name = format!("{comp}.{li}.weight");
                    let values = take_param(&mut params, &name, w.shape())?;
                    let (mname, mask) = masks.next().ok_or_else(|| corrupt(format!("no mask for {name}")))?;
                    if *mname != name || mask.len() != w.len() {
                        return Err(corrupt(format!("mask {mname} does not match {name}")));
                    }
                    *w = trails_core::MaskedTensor::new(values, mask.clone())?;
                }
                if let Some(b) = layer.bias.as_mut() {
                    let name = format!("{comp}.{li}.bias");
                    *b = take_param(&mut params, &name, b.shape())?;
                }
                for (kind, slots) in [("weight", &mut ls.weight), ("bias", &mut ls.bias)] {
                    if let Some(s) = slots.as_mut() {
                        let name = format!("{comp}.{li}.{kind}");
                        let e = entries.next().ok_or_else(|| corrupt(format!("no optimizer entry for {name}")))?;
                        let want = if s.second.is_empty() { 1 } else { 2 };
                        if e.name != name || e.moments.len() != want || e.moments.iter().any(|m| m.len() != s.first.len()) {
                            return Err(corrupt(format!("optimizer entry {} does not match {name}", e.name)));
                        }
                        *s = Slots {
                            first: e.moments[0].clone(),
                            second: e.moments.get(1).cloned().unwrap_or_default(),
                        };
                    }
                }
            }
            *state = fresh;
        }
        if params.next().is_some() || masks.next().is_some() {
            return Err(corrupt("checkpoint holds tensors the model does not have"));
        }
        st.step = self.step as usize;
        st.train_flops = self.train_flops;
        st.loss_sum = self.loss_sum;
        st.loss_count = self.loss_count as usize;
        st.pending_updates = self.pending_updates.clone();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());

        let mut w = Writer::default();
        w.u32(self.params.len() as u32);
        for (name, shape, values) in &self.params {
            w.str(name);
            w.u32(shape.len() as u32);
            shape.iter().for_each(|&d| w.u64(d as u64));
            values.iter().for_each(|&v| w.f32(v));
        }
        section(&mut out, b"PARM", w.0);

        let mut w = Writer::default();
        w.u32(self.masks.len() as u32);
        for (name, mask) in &self.masks {
            w.str(name);
            w.u64(mask.len() as u64);
            let mut bytes = vec![0u8; mask.len().div_ceil(8)];
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                bytes[i / 8] |= 1 << (i % 8);
            }
            w.0.extend(bytes);
        }
        section(&mut out, b"MASK", w.0);

        let mut w = Writer::default();
        w.u32(self.optim.len() as u32);
        for c in &self.optim {
            w.str(&c.name);
            w.u64(c.steps);
            w.u32(c.entries.len() as u32);
            for e in &c.entries {
                w.str(&e.name);
                w.u64(e.moments[0].len() as u64);
                w.0.push(e.moments.len() as u8);
                e.moments.iter().flatten().for_each(|&v| w.f32(v));
            }
        }
        section(&mut out, b"OPTS", w.0);

        let mut w = Writer::default();
        w.u64(self.seed);
        w.u32(self.streams.len() as u32);
        for (name, key) in &self.streams {
            w.str(name);
            w.u64(*key);
        }
        section(&mut out, b"RNGS", w.0);

        let mut w = Writer::default();
        w.f64(self.train_flops);
        w.f64(self.loss_sum);
        w.u64(self.loss_count);
        let json = serde_json::to_vec(&self.pending_updates).expect("updates serialize");
        w.u64(json.len() as u64);
        w.0.extend(json);
        section(&mut out, b"TRNS", w.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic, not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported format version {version} (expected {VERSION})")));
        }
        let config_hash: [u8; 32] = bytes[8..40].try_into().expect("32 bytes");
        let step = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes"));

        let mut payloads: Vec<&[u8]> = Vec::new();
        let mut pos = HEADER_LEN;
        for tag in SECTIONS {
            let missing = || {
                let names: Vec<String> = SECTIONS[payloads.len()..]
                    .iter()
                    .map(|t| String::from_utf8_lossy(*t).into_owned())
                    .collect();
                corrupt(format!("truncated file, missing section {}", names.join(", ")))
            };
            if bytes.len() < pos + 12 {
                return Err(missing());
            }
            if &bytes[pos..pos + 4] != tag {
                return Err(corrupt(format!(
                    "expected section {} at byte {pos}, found {:?}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(&bytes[pos..pos + 4])
                )));
            }
            let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes")) as usize;
            let start = pos + 12;
            if bytes.len() - start < len {
                return Err(missing());
            }
            payloads.push(&bytes[start..start + len]);
            pos = start + len;
        }
        if pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes after the last section", bytes.len() - pos)));
        }

        let mut r = Reader::new(payloads[0], "PARM");
        let mut params = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            params.push((name, shape, values));
        }
        r.finish()?;

        let mut r = Reader::new(payloads[1], "MASK");
        let mut masks = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let len = r.u64()? as usize;
            let bits = r.take(len.div_ceil(8))?;
            masks.push((name, (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect()));
        }
        r.finish()?;

        let mut r = Reader::new(payloads[2], "OPTS");
        let mut optim = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let steps = r.u64()?;
            let mut entries = Vec::new();
            for _ in 0..r.u32()? {
                let ename = r.str()?;
                let len = r.u64()? as usize;
                let count = r.take(1)?[0];
                let moments = (0..count)
                    .map(|_| (0..len).map(|_| r.f32()).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()?;
                if moments.is_empty() {
                    return Err(corrupt(format!("optimizer entry {ename} has no moments")));
                }
                entries.push(OptEntry { name: ename, moments });
            }
            optim.push(OptComponent { name, steps, entries });
        }
        r.finish()?;

        let mut r = Reader::new(payloads[3], "RNGS");
        let seed = r.u64()?;
        let mut streams = Vec::new();
        for _ in 0..r.u32()? {
            streams.push((r.str()?, r.u64()?));
        }
        r.finish()?;

        let mut r = Reader::new(payloads[4], "TRNS");
        let train_flops = r.f64()?;
        let loss_sum = r.f64()?;
        let loss_count = r.u64()?;
        let json_len = r.u64()? as usize;
        let pending_updates = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| corrupt(format!("corrupt payload in section TRNS: {e}")))?;
        r.finish()?;

        Ok(Self {
            version,
            config_hash,
            step,
            params,
            masks,
            optim,
            seed,
            streams,
            train_flops,
            loss_sum,
            loss_count,
            pending_updates,
        })
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| CliError::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

fn take_param<'a>(
    it: &mut impl Iterator<Item = &'a (String, Vec<usize>, Vec<f32>)>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor, CliError> {
    let (pname, pshape, values) = it.next().ok_or_else(|| corrupt(format!("no tensor for {name}")))?;
    if pname != name || pshape != shape {
        return Err(corrupt(format!("tensor {pname} {pshape:?} does not match {name} {shape:?}")));
    }
    Ok(Tensor::new(pshape.clone(), values.clone())?)
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: Vec<u8>) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend(payload);
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.0.extend_from_slice(&(s.len() as u16).to_le_bytes());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        Self { buf, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!(
                "corrupt payload in section {}: read past end at offset {}",
                self.section, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32, CliError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, CliError> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| corrupt(format!("corrupt payload in section {}: invalid name", self.section)))
    }

    fn finish(&self) -> Result<(), CliError> {
        if self.pos != self.buf.len() {
            return Err(corrupt(format!(
                "corrupt payload in section {}: {} unread bytes",
                self.section,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use trails_core::model::{build_trails, NetworkSpec, SparsitySpec};
    use trails_core::optim::Optimizer;
    use trails_core::sparsity::Allocation;
    use trails_core::topology::{Strategy, TopologySchedule};
    use trails_core::train::TrainConfig;

    fn state() -> (TrainState, TrainConfig) {
        let spec = NetworkSpec::mlp(2, 6, 2, 2);
        let sp = SparsitySpec {
            ratio: 0.5,
            allocation: Allocation::Er,
        };
        let m = build_trails(&spec, 1, 2, sp, 3).unwrap();
        let cfg = TrainConfig::new(
            Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            0.01,
            8,
            10,
            TopologySchedule::new(Strategy::Set),
            3,
        );
        let mut st = TrainState::new(m, &cfg);
        st.step = 7;
        st.train_flops = 1234.5;
        st.loss_sum = 0.25;
        st.loss_count = 2;
        for s in &mut st.optim {
            for l in &mut s.layers {
                if let Some(w) = l.weight.as_mut() {
                    w.first.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.5);
                }
            }
        }
        (st, cfg)
    }

    #[test]
    fn round_trip() {
        let (st, cfg) = state();
        let ck = Checkpoint::from_state(&st, [7; 32], 3);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let fresh_model = build_trails(
            &NetworkSpec::mlp(2, 6, 2, 2),
            1,
            2,
            SparsitySpec {
                ratio: 0.5,
                allocation: Allocation::Er,
            },
            99,
        )
        .unwrap();
        let mut fresh = TrainState::new(fresh_model, &cfg);
        back.restore(&mut fresh).unwrap();
        assert_eq!(fresh, st);
    }

    #[test]
    fn truncation_names_missing_section() {
        let (st, _) = state();
        let bytes = Checkpoint::from_state(&st, [0; 32], 3).to_bytes();
        let opts = bytes.windows(4).position(|w| w == b"OPTS").unwrap();
        let err = Checkpoint::from_bytes(&bytes[..opts + 20]).unwrap_err().to_string();
        assert!(err.contains("missing section OPTS"), "{err}");
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("TRNS"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..10]).unwrap_err().to_string().contains("header"));
    }

    #[test]
    fn rejects_version_and_magic() {
        let (st, _) = state();
        let mut bytes = Checkpoint::from_state(&st, [0; 32], 3).to_bytes();
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version 9"));
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn masks_are_bit_packed() {
        let ck = Checkpoint {
            version: VERSION,
            config_hash: [0; 32],
            step: 0,
            params: Vec::new(),
            masks: vec![("m".into(), vec![true, false, true, false, false, false, false, false, true])],
            optim: Vec::new(),
            seed: 0,
            streams: Vec::new(),
            train_flops: 0.0,
            loss_sum: 0.0,
            loss_count: 0,
            pending_updates: Vec::new(),
        };
        let bytes = ck.to_bytes();
        let at = bytes.windows(4).position(|w| w == b"MASK").unwrap() + 12;
        // count, name "m", length 9, then two packed bytes
        assert_eq!(&bytes[at + 4 + 3 + 8..at + 4 + 3 + 8 + 2], &[0b0000_0101, 0b0000_0001]);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }
}
