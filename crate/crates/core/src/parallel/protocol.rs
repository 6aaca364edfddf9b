//! Length-prefixed binary control protocol between the coordinator and its
//! workers.
//!
//! Frame layout: `len u32 LE | type u8 | body`, where `len` counts the type
//! byte plus the body. Commands: RUN (kwargs payload), STOP, ACK, DONE,
//! ERR (UTF-8 message).

use std::io::{Read, Write};

use crate::agent::{KwArgs, KwValue};
use crate::error::{Error, Result};

const TYPE_RUN: u8 = 1;
const TYPE_STOP: u8 = 2;
const TYPE_ACK: u8 = 3;
const TYPE_DONE: u8 = 4;
const TYPE_ERR: u8 = 5;

const TAG_INT: u8 = 1;
const TAG_FLOAT: u8 = 2;
const TAG_BOOL: u8 = 3;
const TAG_STR: u8 = 4;

#[derive(Debug, PartialEq)]
pub(crate) enum Frame {
    Run(KwArgs),
    Stop,
    Ack,
    Done,
    Err(String),
}

fn encode_kwargs(kwargs: &KwArgs, out: &mut Vec<u8>) {
    let entries: Vec<_> = kwargs.iter().collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (key, value) in entries {
        out.extend_from_slice(&(key.len() as u16).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        match value {
            KwValue::Int(v) => {
                out.push(TAG_INT);
                out.extend_from_slice(&v.to_le_bytes());
            }
            KwValue::Float(v) => {
                out.push(TAG_FLOAT);
                out.extend_from_slice(&v.to_le_bytes());
            }
            KwValue::Bool(v) => {
                out.push(TAG_BOOL);
                out.push(u8::from(*v));
            }
            KwValue::Str(v) => {
                out.push(TAG_STR);
                out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                out.extend_from_slice(v.as_bytes());
            }
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Protocol("frame body ends early".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn str(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Protocol("invalid UTF-8 in frame".into()))
    }
}

fn decode_kwargs(body: &[u8]) -> Result<KwArgs> {
    let mut cur = Cursor { buf: body, pos: 0 };
    let count = cur.u32()?;
    let mut kwargs = KwArgs::new();
    for _ in 0..count {
        let key_len = cur.u16()? as usize;
        let key = cur.str(key_len)?;
        match cur.u8()? {
            TAG_INT => {
                let b = cur.take(8)?;
                kwargs.insert(&key, i64::from_le_bytes(b.try_into().unwrap()));
            }
            TAG_FLOAT => {
                let b = cur.take(8)?;
                kwargs.insert(&key, f64::from_le_bytes(b.try_into().unwrap()));
            }
            TAG_BOOL => {
                kwargs.insert(&key, cur.u8()? != 0);
            }
            TAG_STR => {
                let len = cur.u32()? as usize;
                kwargs.insert(&key, cur.str(len)?);
            }
            tag => {
                return Err(Error::Protocol(format!("unknown kwarg tag {tag}")));
            }
        }
    }
    Ok(kwargs)
}

pub(crate) fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    let mut body = Vec::new();
    let frame_type = match frame {
        Frame::Run(kwargs) => {
            encode_kwargs(kwargs, &mut body);
            TYPE_RUN
        }
        Frame::Stop => TYPE_STOP,
        Frame::Ack => TYPE_ACK,
        Frame::Done => TYPE_DONE,
        Frame::Err(msg) => {
            body.extend_from_slice(&(msg.len() as u32).to_le_bytes());
            body.extend_from_slice(msg.as_bytes());
            TYPE_ERR
        }
    };
    let len = (body.len() + 1) as u32;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&[frame_type])?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    if len == 0 {
        return Err(Error::Protocol("zero-length frame".into()));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    let body = &payload[1..];
    match payload[0] {
        TYPE_RUN => Ok(Frame::Run(decode_kwargs(body)?)),
        TYPE_STOP => Ok(Frame::Stop),
        TYPE_ACK => Ok(Frame::Ack),
        TYPE_DONE => Ok(Frame::Done),
        TYPE_ERR => {
            let mut cur = Cursor { buf: body, pos: 0 };
            let len = cur.u32()? as usize;
            Ok(Frame::Err(cur.str(len)?))
        }
        t => Err(Error::Protocol(format!("unknown frame type {t}"))),
    }
}
