//! Byte-exact layout against fixtures written by an independent encoder
//! (`tests/fixtures/gen.py`).

mod common;

use common::fixture;
use eaas::protocol::{
    decode_request, decode_response, decode_sealed_request, decode_sealed_response,
    encode_request, encode_response, image_crc, seal, verify_sealed, DecodeError, RequestRow,
    SlotHeader,
};

const SEQ: u64 = 0x0102_0304_0506_0708;

fn rows() -> Vec<RequestRow> {
    vec![
        RequestRow {
            hidden: vec![1.5, -2.25, 0.0],
            expert_id: 7,
            router_score: 0.75,
            token_tag: 42,
        },
        RequestRow {
            hidden: vec![-0.5, 1024.0, 0.125],
            expert_id: 63,
            router_score: 0.25,
            token_tag: 0xDEAD_BEEF,
        },
    ]
}

fn outputs() -> Vec<f32> {
    vec![0.5, -1.0, 3.25, 1e-3, -0.0, 65504.0]
}

fn header() -> SlotHeader {
    SlotHeader::request(3, 2, 3, SEQ)
}

#[test]
fn request_encodes_to_fixture() {
    let bytes = encode_request(&header(), &rows()).unwrap();
    assert_eq!(bytes, fixture("request.bin"));
    assert_eq!(seal(bytes), fixture("request_sealed.bin"));
}

#[test]
fn response_encodes_to_fixture() {
    let bytes = encode_response(&header().response(2), &outputs()).unwrap();
    assert_eq!(bytes, fixture("response.bin"));
    assert_eq!(seal(bytes), fixture("response_sealed.bin"));
}

#[test]
fn fixtures_decode_to_values() {
    assert_eq!(decode_request(&fixture("request.bin")).unwrap(), (header(), rows()));
    assert_eq!(decode_sealed_request(&fixture("request_sealed.bin")).unwrap(), (header(), rows()));
    for name in ["response.bin", "response_sealed.bin"] {
        let bytes = fixture(name);
        let (h, v) = if name.contains("sealed") {
            decode_sealed_response(&bytes).unwrap()
        } else {
            decode_response(&bytes).unwrap()
        };
        assert_eq!(h, header().response(2));
        assert!(v.iter().map(|f| f.to_bits()).eq(outputs().iter().map(|f| f.to_bits())));
    }
}

#[test]
fn field_offsets() {
    let b = fixture("request_sealed.bin");
    assert_eq!(b.len(), 84);
    assert_eq!(b[0], 1);
    assert_eq!(&b[1..8], &[0; 7]);
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 48);
    assert_eq!(u64::from_le_bytes(b[24..32].try_into().unwrap()), SEQ);
    // First row: three hidden values, then expert id, score, token tag.
    assert_eq!(f32::from_le_bytes(b[32..36].try_into().unwrap()), 1.5);
    assert_eq!(u32::from_le_bytes(b[44..48].try_into().unwrap()), 7);
    assert_eq!(f32::from_le_bytes(b[48..52].try_into().unwrap()), 0.75);
    assert_eq!(u32::from_le_bytes(b[52..56].try_into().unwrap()), 42);
    assert_eq!(u32::from_le_bytes(b[76..80].try_into().unwrap()), 0xDEAD_BEEF);
    assert_eq!(u32::from_le_bytes(b[80..84].try_into().unwrap()), image_crc(&b[..80]));

    let r = fixture("response_sealed.bin");
    assert_eq!(r.len(), 60);
    assert_eq!(r[0], 2);
    assert_eq!(u32::from_le_bytes(r[20..24].try_into().unwrap()), 24);
}

#[test]
fn state_byte_is_outside_the_checksum() {
    let mut b = fixture("request_sealed.bin");
    b[0] = 2;
    assert!(verify_sealed(&b).is_ok());
    b[3] = 9;
    assert!(verify_sealed(&b).is_ok());
}

#[test]
fn corruption_and_truncation_are_rejected() {
    let good = fixture("request_sealed.bin");
    let mut bad = good.clone();
    bad[40] ^= 0x10;
    assert!(matches!(decode_sealed_request(&bad), Err(DecodeError::Checksum)));
    assert!(decode_sealed_request(&good[..good.len() - 1]).is_err());
    assert!(decode_request(&good[..40]).is_err());
    let mut wrong_state = fixture("request.bin");
    wrong_state[0] = 2;
    assert!(decode_request(&wrong_state).is_err());
}
