//! NBD wire client encoded from scratch. Constants are written out verbatim
//! from the protocol specification, never imported from the crate under
//! test, so a server-side encoding slip cannot cancel out in assertions.

use std::io::{Read, Write};

pub const NBDMAGIC: u64 = 0x4e42_444d_4147_4943;
pub const IHAVEOPT: u64 = 0x4948_4156_454f_5054;
pub const OPT_REPLY_MAGIC: u64 = 0x0003_e889_0455_65a9;
pub const REQUEST_MAGIC: u32 = 0x2560_9513;
pub const SIMPLE_REPLY_MAGIC: u32 = 0x6744_6698;

pub const OPT_EXPORT_NAME: u32 = 1;
pub const OPT_ABORT: u32 = 2;
pub const OPT_GO: u32 = 7;
pub const REP_ACK: u32 = 1;
pub const REP_INFO: u32 = 3;
pub const REP_ERR_UNSUP: u32 = (1 << 31) | 1;
pub const REP_ERR_UNKNOWN: u32 = (1 << 31) | 6;
pub const INFO_EXPORT: u16 = 0;

pub const CMD_READ: u16 = 0;
pub const CMD_WRITE: u16 = 1;
pub const CMD_DISC: u16 = 2;
pub const CMD_FLUSH: u16 = 3;
pub const CMD_TRIM: u16 = 4;

pub const EPERM: u32 = 1;
pub const EOPNOTSUPP: u32 = 95;

pub fn read_greeting<S: Read>(s: &mut S) -> u16 {
    let mut g = [0u8; 18];
    s.read_exact(&mut g).unwrap();
    assert_eq!(u64::from_be_bytes(g[0..8].try_into().unwrap()), NBDMAGIC);
    assert_eq!(u64::from_be_bytes(g[8..16].try_into().unwrap()), IHAVEOPT);
    let hflags = u16::from_be_bytes(g[16..18].try_into().unwrap());
    assert_ne!(hflags & 1, 0, "server must offer fixed newstyle");
    hflags
}

pub fn send_client_flags<S: Write>(s: &mut S) {
    s.write_all(&1u32.to_be_bytes()).unwrap();
}

pub fn send_option<S: Write>(s: &mut S, option: u32, payload: &[u8]) {
    let mut buf = Vec::with_capacity(16 + payload.len());
    buf.extend_from_slice(&IHAVEOPT.to_be_bytes());
    buf.extend_from_slice(&option.to_be_bytes());
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(payload);
    s.write_all(&buf).unwrap();
}

pub fn go_payload(name: &str) -> Vec<u8> {
    let mut p = Vec::with_capacity(6 + name.len());
    p.extend_from_slice(&(name.len() as u32).to_be_bytes());
    p.extend_from_slice(name.as_bytes());
    p.extend_from_slice(&0u16.to_be_bytes());
    p
}

pub struct OptionReply {
    pub reply_type: u32,
    pub data: Vec<u8>,
}

pub fn read_option_reply<S: Read>(s: &mut S, expect_option: u32) -> OptionReply {
    let mut hdr = [0u8; 20];
    s.read_exact(&mut hdr).unwrap();
    assert_eq!(u64::from_be_bytes(hdr[0..8].try_into().unwrap()), OPT_REPLY_MAGIC);
    assert_eq!(u32::from_be_bytes(hdr[8..12].try_into().unwrap()), expect_option);
    let reply_type = u32::from_be_bytes(hdr[12..16].try_into().unwrap());
    let len = u32::from_be_bytes(hdr[16..20].try_into().unwrap());
    let mut data = vec![0u8; len as usize];
    s.read_exact(&mut data).unwrap();
    OptionReply { reply_type, data }
}

/// OPT_GO haggle. Returns (export size, transmission flags).
pub fn negotiate_go<S: Read + Write>(s: &mut S, name: &str) -> (u64, u16) {
    read_greeting(s);
    send_client_flags(s);
    send_option(s, OPT_GO, &go_payload(name));
    let mut export: Option<(u64, u16)> = None;
    loop {
        let rep = read_option_reply(s, OPT_GO);
        match rep.reply_type {
            REP_INFO => {
                if u16::from_be_bytes(rep.data[0..2].try_into().unwrap()) == INFO_EXPORT {
                    let size = u64::from_be_bytes(rep.data[2..10].try_into().unwrap());
                    let flags = u16::from_be_bytes(rep.data[10..12].try_into().unwrap());
                    export = Some((size, flags));
                }
            }
            REP_ACK => return export.expect("server sent no export info"),
            other => panic!("unexpected reply type {other:#x}"),
        }
    }
}

/// Legacy single-shot negotiation. Returns (export size, flags).
pub fn negotiate_export_name<S: Read + Write>(s: &mut S, name: &str) -> (u64, u16) {
    read_greeting(s);
    send_client_flags(s);
    send_option(s, OPT_EXPORT_NAME, name.as_bytes());
    let mut fixed = [0u8; 10];
    s.read_exact(&mut fixed).unwrap();
    let size = u64::from_be_bytes(fixed[0..8].try_into().unwrap());
    let flags = u16::from_be_bytes(fixed[8..10].try_into().unwrap());
    let mut pad = [0u8; 124];
    s.read_exact(&mut pad).unwrap();
    assert!(pad.iter().all(|&b| b == 0));
    (size, flags)
}

pub fn send_request<S: Write>(s: &mut S, cmd: u16, cookie: u64, offset: u64, length: u32) {
    let mut hdr = [0u8; 28];
    hdr[0..4].copy_from_slice(&REQUEST_MAGIC.to_be_bytes());
    hdr[6..8].copy_from_slice(&cmd.to_be_bytes());
    hdr[8..16].copy_from_slice(&cookie.to_be_bytes());
    hdr[16..24].copy_from_slice(&offset.to_be_bytes());
    hdr[24..28].copy_from_slice(&length.to_be_bytes());
    s.write_all(&hdr).unwrap();
}

pub fn read_simple_reply<S: Read>(s: &mut S, cookie: u64) -> u32 {
    let mut rep = [0u8; 16];
    s.read_exact(&mut rep).unwrap();
    assert_eq!(u32::from_be_bytes(rep[0..4].try_into().unwrap()), SIMPLE_REPLY_MAGIC);
    let errno = u32::from_be_bytes(rep[4..8].try_into().unwrap());
    assert_eq!(u64::from_be_bytes(rep[8..16].try_into().unwrap()), cookie);
    errno
}

pub fn cmd_write<S: Read + Write>(s: &mut S, cookie: u64, offset: u64, data: &[u8]) -> u32 {
    send_request(s, CMD_WRITE, cookie, offset, data.len() as u32);
    s.write_all(data).unwrap();
    read_simple_reply(s, cookie)
}

pub fn cmd_read<S: Read + Write>(
    s: &mut S,
    cookie: u64,
    offset: u64,
    length: u32,
) -> Result<Vec<u8>, u32> {
    send_request(s, CMD_READ, cookie, offset, length);
    let errno = read_simple_reply(s, cookie);
    if errno != 0 {
        return Err(errno);
    }
    let mut data = vec![0u8; length as usize];
    s.read_exact(&mut data).unwrap();
    Ok(data)
}

pub fn cmd_simple<S: Read + Write>(s: &mut S, cmd: u16, cookie: u64) -> u32 {
    send_request(s, cmd, cookie, 0, 0);
    read_simple_reply(s, cookie)
}

pub fn cmd_disc<S: Write>(s: &mut S, cookie: u64) {
    send_request(s, CMD_DISC, cookie, 0, 0);
}
