use mpsl_tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MPSL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Register = 0,
    Activations = 1,
    Prediction = 2,
    Loss = 3,
    CutGrad = 4,
    ModelPull = 5,
    ModelPush = 6,
    Abort = 7,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Register,
        MsgType::Activations,
        MsgType::Prediction,
        MsgType::Loss,
        MsgType::CutGrad,
        MsgType::ModelPull,
        MsgType::ModelPush,
        MsgType::Abort,
    ];

    pub fn from_u8(v: u8) -> Option<MsgType> {
        MsgType::ALL.get(usize::from(v)).copied()
    }
}

/// Typed frame payloads. There is deliberately no variant or field that
/// can carry labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Register,
    /// Cut-layer activations: one tensor (early fusion) or one per modality.
    Activations(Vec<Tensor>),
    /// Server prediction `ŷ` for the client's batch.
    Prediction(Tensor),
    /// Client loss value and batch size `|B_n|`.
    Loss { value: f32, count: u32 },
    /// Gradient tensors: downlink carries `∂L_S/∂a_n`; uplink carries
    /// `∂L_Cn/∂ŷ`.
    CutGrad(Vec<Tensor>),
    ModelPull(Vec<Tensor>),
    ModelPush(Vec<Tensor>),
    Abort(String),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Register => MsgType::Register,
            Message::Activations(_) => MsgType::Activations,
            Message::Prediction(_) => MsgType::Prediction,
            Message::Loss { .. } => MsgType::Loss,
            Message::CutGrad(_) => MsgType::CutGrad,
            Message::ModelPull(_) => MsgType::ModelPull,
            Message::ModelPush(_) => MsgType::ModelPush,
            Message::Abort(_) => MsgType::Abort,
        }
    }

    fn payload_len(&self) -> usize {
        let tensors = |ts: &[Tensor]| ts.iter().map(Tensor::encoded_len).sum::<usize>();
        match self {
            Message::Register => 0,
            Message::Activations(ts) | Message::CutGrad(ts) | Message::ModelPull(ts) | Message::ModelPush(ts) => {
                tensors(ts)
            }
            Message::Prediction(t) => t.encoded_len(),
            Message::Loss { .. } => 8,
            Message::Abort(s) => s.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub round: u32,
    pub client_id: u32,
    pub message: Message,
}

impl Frame {
    pub fn new(round: u32, client_id: u32, message: Message) -> Frame {
        Frame { round, client_id, message }
    }

    pub fn msg_type(&self) -> MsgType {
        self.message.msg_type()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.message.payload_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.msg_type() as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&(self.message.payload_len() as u64).to_le_bytes());
        match &self.message {
            Message::Register => {}
            Message::Activations(ts) | Message::CutGrad(ts) | Message::ModelPull(ts) | Message::ModelPush(ts) => {
                for t in ts {
                    t.write_bytes(&mut out);
                }
            }
            Message::Prediction(t) => t.write_bytes(&mut out),
            Message::Loss { value, count } => {
                out.extend_from_slice(&value.to_le_bytes());
                out.extend_from_slice(&count.to_le_bytes());
            }
            Message::Abort(s) => out.extend_from_slice(s.as_bytes()),
        }
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let (f, used) = decode_frame(bytes)?;
        if used != bytes.len() {
            return Err(Error::Decode { offset: used, msg: "trailing bytes after frame".into() });
        }
        Ok(f)
    }
}

/// Total length of the frame starting at `header`, read from its header.
pub fn frame_len(header: &[u8]) -> Result<usize> {
    check_header(header)?;
    let len = u64::from_le_bytes(header[14..22].try_into().expect("8 bytes"));
    usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Decode { offset: 14, msg: format!("payload length {len} too large") })
}

fn check_header(bytes: &[u8]) -> Result<MsgType> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode {
            offset: bytes.len(),
            msg: format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Decode { offset: 0, msg: "bad magic".into() });
    }
    if bytes[4] != VERSION {
        return Err(Error::Decode { offset: 4, msg: format!("unsupported version {}", bytes[4]) });
    }
    MsgType::from_u8(bytes[5]).ok_or_else(|| Error::Decode { offset: 5, msg: format!("unknown msg_type {}", bytes[5]) })
}

/// Decodes the frame at the start of `bytes`, returning it and the number
/// of bytes it occupied.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize)> {
    let msg_type = check_header(bytes)?;
    let round = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    let client_id = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
    let total = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(Error::Decode {
            offset: bytes.len(),
            msg: format!("truncated payload: frame needs {total} bytes"),
        });
    }
    let payload = &bytes[HEADER_LEN..total];
    let tensors = |payload: &[u8]| -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < payload.len() {
            let (t, used) = Tensor::from_bytes(&payload[pos..]).map_err(|e| Error::Decode {
                offset: HEADER_LEN + pos,
                msg: e.to_string(),
            })?;
            out.push(t);
            pos += used;
        }
        Ok(out)
    };
    let message = match msg_type {
        MsgType::Register => {
            if !payload.is_empty() {
                return Err(Error::Decode { offset: HEADER_LEN, msg: "Register carries no payload".into() });
            }
            Message::Register
        }
        MsgType::Activations => Message::Activations(tensors(payload)?),
        MsgType::Prediction => {
            let mut ts = tensors(payload)?;
            if ts.len() != 1 {
                return Err(Error::Decode {
                    offset: HEADER_LEN,
                    msg: format!("Prediction holds {} tensors, expected 1", ts.len()),
                });
            }
            Message::Prediction(ts.remove(0))
        }
        MsgType::Loss => {
            if payload.len() != 8 {
                return Err(Error::Decode {
                    offset: HEADER_LEN,
                    msg: format!("Loss payload is {} bytes, expected 8", payload.len()),
                });
            }
            Message::Loss {
                value: f32::from_le_bytes(payload[0..4].try_into().expect("4 bytes")),
                count: u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes")),
            }
        }
        MsgType::CutGrad => Message::CutGrad(tensors(payload)?),
        MsgType::ModelPull => Message::ModelPull(tensors(payload)?),
        MsgType::ModelPush => Message::ModelPush(tensors(payload)?),
        MsgType::Abort => Message::Abort(
            String::from_utf8(payload.to_vec())
                .map_err(|e| Error::Decode { offset: HEADER_LEN + e.utf8_error().valid_up_to(), msg: "Abort reason is not UTF-8".into() })?,
        ),
    };
    Ok((Frame { round, client_id, message }, total))
}
