//! GTKM motion files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "GTKM" | version u16 | joints u16 | rot values u16 | fps f32 | frames u32
//! frames × joints × rot values f32
//! chunks: tag [u8; 4] | count u32 | count elements
//!   "AUDI" f32 samples, "TEXT" u32 word ids, "BEAT" f32 seconds
//! ```

use std::fmt::Write as _;
use std::io::{Read, Write};

use super::skeleton::{JOINTS, ROT_DIM};
use super::{MotionError, MotionSequence};

pub const MAGIC: &[u8; 4] = b"GTKM";
pub const VERSION: u16 = 1;

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(seq: &MotionSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + seq.poses.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(JOINTS as u16).to_le_bytes());
    out.extend_from_slice(&(ROT_DIM as u16).to_le_bytes());
    out.extend_from_slice(&(seq.fps as f32).to_le_bytes());
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    put_f32s(&mut out, &seq.poses);
    if let Some(a) = &seq.audio {
        out.extend_from_slice(b"AUDI");
        out.extend_from_slice(&(a.len() as u32).to_le_bytes());
        put_f32s(&mut out, a);
    }
    if let Some(w) = &seq.words {
        out.extend_from_slice(b"TEXT");
        out.extend_from_slice(&(w.len() as u32).to_le_bytes());
        for x in w {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(b) = &seq.beats {
        out.extend_from_slice(b"BEAT");
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        put_f32s(&mut out, b);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], MotionError> {
        if self.buf.len() - self.pos < n {
            return Err(MotionError::Format(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, MotionError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, MotionError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, MotionError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| MotionError::Format(format!("{what} too long")))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<MotionSequence, MotionError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(MotionError::Format("bad magic, not a GTKM file".into()));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(MotionError::Format(format!("unsupported version {version}")));
    }
    let joints = c.u16("joint count")? as usize;
    let rot = c.u16("rotation width")? as usize;
    if joints != JOINTS || rot != ROT_DIM {
        return Err(MotionError::Format(format!("skeleton {joints}×{rot}, expected {JOINTS}×{ROT_DIM}")));
    }
    let fps = f32::from_le_bytes(c.take(4, "fps")?.try_into().unwrap()) as f64;
    let frames = c.u32("frame count")? as usize;
    let poses = c.f32s(frames * joints * rot, "frames")?;
    let mut seq = MotionSequence::new(fps, poses)?;
    while c.pos < buf.len() {
        let tag: [u8; 4] = c.take(4, "chunk tag")?.try_into().unwrap();
        let n = c.u32("chunk length")? as usize;
        match &tag {
            b"AUDI" => seq.audio = Some(c.f32s(n, "audio chunk")?),
            b"TEXT" => {
                let raw = c.take(n * 4, "text chunk")?;
                seq.words = Some(raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect());
            }
            b"BEAT" => seq.beats = Some(c.f32s(n, "beat chunk")?),
            other => {
                return Err(MotionError::Format(format!("unknown chunk {:?}", String::from_utf8_lossy(other))));
            }
        }
    }
    seq.validate()?;
    Ok(seq)
}

pub fn write(seq: &MotionSequence, mut w: impl Write) -> Result<(), MotionError> {
    w.write_all(&to_bytes(seq))?;
    Ok(())
}

pub fn read(mut r: impl Read) -> Result<MotionSequence, MotionError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

/// Plain-text dump: a header comment then one whitespace-separated row per frame.
pub fn to_text(seq: &MotionSequence) -> String {
    let mut s = format!("# fps {} frames {} joints {JOINTS} rot {ROT_DIM}\n", seq.fps, seq.len());
    for f in 0..seq.len() {
        let row: Vec<String> = seq.frame(f).iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}
