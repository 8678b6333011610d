//! Length-prefixed JSON framing: a `u32` little-endian byte count followed
//! by one JSON document.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    let data = serde_json::to_vec(msg)?;
    let len = u32::try_from(data.len())
        .ok()
        .filter(|&n| n as usize <= MAX_FRAME_LEN)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&data)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream before a header.
pub fn read_frame<R: Read, T: DeserializeOwned>(r: &mut R) -> io::Result<Option<T>> {
    match read_frame_bytes(r)? {
        Some(buf) => Ok(Some(serde_json::from_slice(&buf)?)),
        None => Ok(None),
    }
}

pub(crate) fn read_frame_bytes<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Open {
        depth_map: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_turns: Option<u32>,
    },
    Step { session: String, text: String },
    Close { session: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Opened,
    ToolResponse,
    Final,
    Closed,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    pub kind: ResponseKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
}

impl Response {
    pub fn error(text: impl Into<String>) -> Self {
        Self {
            ok: false,
            kind: ResponseKind::Error,
            text: text.into(),
            session: None,
        }
    }
}

/// Blocking client, one request in flight at a time.
pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn request(&mut self, req: &Request) -> io::Result<Response> {
        write_frame(&mut self.stream, req)?;
        read_frame(&mut self.stream)?.ok_or_else(|| {
            io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the connection")
        })
    }

    pub fn open(&mut self, depth_map: &str) -> io::Result<Response> {
        self.request(&Request::Open {
            depth_map: depth_map.to_owned(),
            max_turns: None,
        })
    }

    pub fn step(&mut self, session: &str, text: &str) -> io::Result<Response> {
        self.request(&Request::Step {
            session: session.to_owned(),
            text: text.to_owned(),
        })
    }

    pub fn close(&mut self, session: &str) -> io::Result<Response> {
        self.request(&Request::Close {
            session: session.to_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let mut buf = Vec::new();
        write_frame(
            &mut buf,
            &Request::Close {
                session: "s1".into(),
            },
        )
        .unwrap();
        let body = br#"{"op":"close","session":"s1"}"#;
        assert_eq!(&buf[..4], &(body.len() as u32).to_le_bytes());
        assert_eq!(&buf[4..], body);

        let mut r = &buf[..];
        let back: Request = read_frame(&mut r).unwrap().unwrap();
        assert_eq!(back, Request::Close { session: "s1".into() });
        assert!(read_frame::<_, Request>(&mut r).unwrap().is_none());
    }

    #[test]
    fn oversized_and_truncated_frames() {
        let mut big = ((MAX_FRAME_LEN + 1) as u32).to_le_bytes().to_vec();
        big.extend_from_slice(b"{}");
        assert!(read_frame::<_, Request>(&mut &big[..]).is_err());

        let mut short = 10u32.to_le_bytes().to_vec();
        short.extend_from_slice(b"{}");
        assert!(read_frame::<_, Request>(&mut &short[..]).is_err());
    }

    #[test]
    fn response_json() {
        let r = Response {
            ok: true,
            kind: ResponseKind::ToolResponse,
            text: "Depth(0,0)=777mm".into(),
            session: None,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"ok":true,"kind":"tool_response","text":"Depth(0,0)=777mm"}"#
        );
    }
}
