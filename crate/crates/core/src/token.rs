//! Encrypted time+device query tokens.
//!
//! A token is `AES-128-CBC(PKCS#7, "<unix_seconds>@<device_id>")` rendered as
//! unpadded URL-safe base64. The IV is fixed by configuration, so minting is
//! deterministic: the same payload under the same key always yields the same
//! token string. A fixed IV leaks equality of plaintexts and is not what you
//! would ship for confidentiality; it is kept because reproducible datasets
//! depend on it, and replay detection on the server side does not rely on it.

use std::fmt;
use std::str::FromStr;

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

type Aes128CbcEnc = cbc::Encryptor<aes::Aes128>;
type Aes128CbcDec = cbc::Decryptor<aes::Aes128>;

/// Separator between the timestamp and the device id in the plaintext.
pub const SEPARATOR: char = '@';
/// Longest accepted device identifier, in bytes.
pub const MAX_DEVICE_ID_LEN: usize = 64;
/// Query key carrying the token.
pub const TOKEN_QUERY_KEY: &str = "id";
/// Query key carrying the resubmit flag.
pub const RESUBMIT_QUERY_KEY: &str = "resubmit";

const BLOCK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("token is not valid url-safe base64 of whole cipher blocks")]
    TokenUndecodable,
    #[error("token does not decrypt to a correctly padded plaintext")]
    TokenUndecryptable,
    #[error("invalid key material: {0}")]
    InvalidKey(String),
}

/// The plaintext bound into a token: when it was minted and by which device.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenPayload {
    pub timestamp_utc: i64,
    pub device_id: String,
}

impl TokenPayload {
    pub fn new(timestamp_utc: i64, device_id: impl Into<String>) -> Result<Self, TokenError> {
        let payload = Self {
            timestamp_utc,
            device_id: device_id.into(),
        };
        payload.check().map_err(TokenError::InvalidPayload)?;
        Ok(payload)
    }

    fn check(&self) -> Result<(), String> {
        if self.timestamp_utc < 0 {
            return Err(format!("negative timestamp {}", self.timestamp_utc));
        }
        check_device_id(&self.device_id)
    }
}

/// Device ids are 1..=64 bytes of printable, non-whitespace ASCII without `@`.
pub fn check_device_id(id: &str) -> Result<(), String> {
    if id.is_empty() || id.len() > MAX_DEVICE_ID_LEN {
        return Err(format!(
            "device id length {} outside 1..={MAX_DEVICE_ID_LEN}",
            id.len()
        ));
    }
    if let Some(c) = id
        .chars()
        .find(|&c| !c.is_ascii_graphic() || c == SEPARATOR)
    {
        return Err(format!("device id contains forbidden character {c:?}"));
    }
    Ok(())
}

pub fn format_payload(p: &TokenPayload) -> Result<String, TokenError> {
    p.check().map_err(TokenError::InvalidPayload)?;
    Ok(format!("{}{SEPARATOR}{}", p.timestamp_utc, p.device_id))
}

pub fn parse_payload(s: &str) -> Result<TokenPayload, TokenError> {
    let malformed = |why: &str| TokenError::MalformedPayload(why.to_string());
    let mut parts = s.split(SEPARATOR);
    let (Some(ts), Some(device), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(malformed("expected exactly one separator"));
    };
    if ts.is_empty() || !ts.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed("timestamp is not a decimal integer"));
    }
    let timestamp_utc: i64 = ts
        .parse()
        .map_err(|_| malformed("timestamp out of range"))?;
    check_device_id(device).map_err(TokenError::MalformedPayload)?;
    Ok(TokenPayload {
        timestamp_utc,
        device_id: device.to_string(),
    })
}

/// AES-128 key and the fixed CBC IV.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    key: [u8; 16],
    iv: [u8; 16],
}

impl KeyMaterial {
    pub fn new(key: [u8; 16], iv: [u8; 16]) -> Self {
        Self { key, iv }
    }

    /// Parses two 32-character hex strings.
    pub fn from_hex(key_hex: &str, iv_hex: &str) -> Result<Self, TokenError> {
        fn decode16(label: &str, s: &str) -> Result<[u8; 16], TokenError> {
            let bytes = hex::decode(s.trim())
                .map_err(|e| TokenError::InvalidKey(format!("{label}: {e}")))?;
            bytes.try_into().map_err(|b: Vec<u8>| {
                TokenError::InvalidKey(format!("{label}: expected 16 bytes, got {}", b.len()))
            })
        }
        Ok(Self {
            key: decode16("key", key_hex)?,
            iv: decode16("iv", iv_hex)?,
        })
    }

    pub fn key_hex(&self) -> String {
        hex::encode(self.key)
    }

    pub fn iv_hex(&self) -> String {
        hex::encode(self.iv)
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial").finish_non_exhaustive()
    }
}

/// Hex form used in config files: `key_hex` / `iv_hex`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyConfig {
    pub key_hex: String,
    pub iv_hex: String,
}

impl TryFrom<KeyConfig> for KeyMaterial {
    type Error = TokenError;

    fn try_from(c: KeyConfig) -> Result<Self, Self::Error> {
        KeyMaterial::from_hex(&c.key_hex, &c.iv_hex)
    }
}

impl From<KeyMaterial> for KeyConfig {
    fn from(k: KeyMaterial) -> Self {
        KeyConfig {
            key_hex: k.key_hex(),
            iv_hex: k.iv_hex(),
        }
    }
}

impl Serialize for KeyMaterial {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        KeyConfig::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for KeyMaterial {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        KeyConfig::deserialize(d)?
            .try_into()
            .map_err(serde::de::Error::custom)
    }
}

/// Wire form of a token: unpadded URL-safe base64 of the ciphertext.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(String);

impl Token {
    /// Wraps a string without checking it; validity is judged on open.
    pub fn from_wire(s: impl Into<String>) -> Self {
        Token(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Decodes the base64 body, requiring whole cipher blocks.
    pub fn ciphertext(&self) -> Result<Vec<u8>, TokenError> {
        let bytes = URL_SAFE_NO_PAD
            .decode(self.0.as_bytes())
            .map_err(|_| TokenError::TokenUndecodable)?;
        if bytes.is_empty() || bytes.len() % BLOCK != 0 {
            return Err(TokenError::TokenUndecodable);
        }
        Ok(bytes)
    }

    pub fn from_ciphertext(bytes: &[u8]) -> Self {
        Token(URL_SAFE_NO_PAD.encode(bytes))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Token {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Token(s.to_string()))
    }
}

pub fn mint_token(p: &TokenPayload, k: &KeyMaterial) -> Result<Token, TokenError> {
    let plaintext = format_payload(p)?;
    let ct = Aes128CbcEnc::new(&k.key.into(), &k.iv.into())
        .encrypt_padded_vec_mut::<Pkcs7>(plaintext.as_bytes());
    Ok(Token::from_ciphertext(&ct))
}

pub fn open_token(t: &Token, k: &KeyMaterial) -> Result<TokenPayload, TokenError> {
    let ct = t.ciphertext()?;
    let pt = Aes128CbcDec::new(&k.key.into(), &k.iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(&ct)
        .map_err(|_| TokenError::TokenUndecryptable)?;
    let s = std::str::from_utf8(&pt)
        .map_err(|_| TokenError::MalformedPayload("plaintext is not utf-8".into()))?;
    parse_payload(s)
}

/// `<base_url>?id=<token>&resubmit=<bool>`. `base_url` must not already carry a query.
pub fn embed_token(base_url: &str, t: &Token, resubmit: bool) -> String {
    format!("{base_url}?{TOKEN_QUERY_KEY}={t}&{RESUBMIT_QUERY_KEY}={resubmit}")
}

/// Pulls the token and resubmit flag out of a URL (absolute, relative, or a
/// bare query string). A missing `id` is not an error here.
pub fn extract_token(url: &str) -> (Option<Token>, bool) {
    let query = match url.split_once('?') {
        Some((_, q)) => q,
        None if url.contains('=') && !url.contains('/') => url,
        None => return (None, false),
    };
    let query = query.split('#').next().unwrap_or_default();
    let mut token = None;
    let mut resubmit = false;
    for (k, v) in form_urlencoded::parse(query.as_bytes()) {
        match k.as_ref() {
            TOKEN_QUERY_KEY if token.is_none() && !v.is_empty() => {
                token = Some(Token(v.into_owned()))
            }
            RESUBMIT_QUERY_KEY => resubmit = matches!(v.as_ref(), "true" | "1"),
            _ => {}
        }
    }
    (token, resubmit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> KeyMaterial {
        let mut k = [0u8; 16];
        let mut iv = [0u8; 16];
        for i in 0..16 {
            k[i] = i as u8;
            iv[i] = 16 + i as u8;
        }
        KeyMaterial::new(k, iv)
    }

    #[test]
    fn format_examples() {
        let p = TokenPayload::new(1_710_000_000, "PWAdev01").unwrap();
        assert_eq!(format_payload(&p).unwrap(), "1710000000@PWAdev01");
        let p = TokenPayload::new(0, "d").unwrap();
        assert_eq!(format_payload(&p).unwrap(), "0@d");
        let bad = TokenPayload {
            timestamp_utc: 1_710_000_000,
            device_id: "a@b".into(),
        };
        assert!(matches!(
            format_payload(&bad),
            Err(TokenError::InvalidPayload(_))
        ));
    }

    #[test]
    fn payload_rejects_bad_device_ids() {
        assert!(TokenPayload::new(1, "").is_err());
        assert!(TokenPayload::new(1, "has space").is_err());
        assert!(TokenPayload::new(1, "tab\tid").is_err());
        assert!(TokenPayload::new(1, "x".repeat(65)).is_err());
        assert!(TokenPayload::new(1, "x".repeat(64)).is_ok());
        assert!(TokenPayload::new(-1, "d").is_err());
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_payload("1710000000@PWAdev01").unwrap(),
            TokenPayload::new(1_710_000_000, "PWAdev01").unwrap()
        );
        for bad in [
            "abc@dev",
            "1710000000",
            "1@a@b",
            "@dev",
            "1@",
            "+5@d",
            "-5@d",
            "",
        ] {
            assert!(
                matches!(parse_payload(bad), Err(TokenError::MalformedPayload(_))),
                "{bad:?} parsed"
            );
        }
    }

    // Expected ciphertexts computed with an independent AES-CBC/PKCS#7
    // implementation (Python `cryptography`), key 00..0f, iv 10..1f.
    #[test]
    fn matches_reference_vectors() {
        let k = key();
        let t = mint_token(&TokenPayload::new(1_710_000_000, "PWAdev01").unwrap(), &k).unwrap();
        assert_eq!(t.as_str(), "CcfIQhuGWP0HmU1TzueVXnzA2-vtiQqDATenU-BbVfk");
        assert_eq!(t.ciphertext().unwrap().len(), 32);
        let t = mint_token(&TokenPayload::new(0, "d").unwrap(), &k).unwrap();
        assert_eq!(t.as_str(), "Jx86MjgIF1_qZXsTe1Wn_g");
        let t = mint_token(&TokenPayload::new(1_710_000_000, "ATKdev0003").unwrap(), &k).unwrap();
        assert_eq!(t.as_str(), "Y5JmmpSZEMrvlPXz8ZLSq5466lLZSuemE8l_NjLMCnA");
    }

    #[test]
    fn deterministic_and_round_trips() {
        let k = key();
        let p = TokenPayload::new(1_710_000_000, "PWAdev01").unwrap();
        let a = mint_token(&p, &k).unwrap();
        let b = mint_token(&p, &k).unwrap();
        assert_eq!(a, b);
        assert_eq!(open_token(&a, &k).unwrap(), p);
    }

    #[test]
    fn open_errors() {
        let k = key();
        assert_eq!(
            open_token(&Token::from_wire("!!!"), &k),
            Err(TokenError::TokenUndecodable)
        );
        // 15 bytes: not a whole block
        assert_eq!(
            open_token(&Token::from_ciphertext(&[7u8; 15]), &k),
            Err(TokenError::TokenUndecodable)
        );
        assert_eq!(
            open_token(&Token::from_wire(""), &k),
            Err(TokenError::TokenUndecodable)
        );
        // Plaintext with valid padding but not a payload.
        let ct = Aes128CbcEnc::new(&k.key.into(), &k.iv.into())
            .encrypt_padded_vec_mut::<Pkcs7>(b"hello world");
        assert!(matches!(
            open_token(&Token::from_ciphertext(&ct), &k),
            Err(TokenError::MalformedPayload(_))
        ));
    }

    #[test]
    fn wrong_key_never_yields_original() {
        let k = key();
        let other = KeyMaterial::new([9; 16], [16; 16].map(|x: u8| x + 1));
        let p = TokenPayload::new(1_710_000_000, "PWAdev01").unwrap();
        let t = mint_token(&p, &k).unwrap();
        assert_ne!(open_token(&t, &other).ok(), Some(p));
    }

    #[test]
    fn key_from_hex() {
        let k = KeyMaterial::from_hex(
            "000102030405060708090a0b0c0d0e0f",
            "101112131415161718191a1b1c1d1e1f",
        )
        .unwrap();
        assert_eq!(k, key());
        assert!(KeyMaterial::from_hex("00", "101112131415161718191a1b1c1d1e1f").is_err());
        assert!(KeyMaterial::from_hex("zz0102030405060708090a0b0c0d0e0f", "00").is_err());
    }

    #[test]
    fn url_embedding() {
        let t = Token::from_wire("XYZ");
        assert_eq!(
            embed_token("http://spare.com", &t, false),
            "http://spare.com?id=XYZ&resubmit=false"
        );
        assert_eq!(
            embed_token("http://spare.com", &t, true),
            "http://spare.com?id=XYZ&resubmit=true"
        );
        assert_eq!(extract_token("http://spare.com"), (None, false));
        assert_eq!(
            extract_token("http://spare.com?id=XYZ"),
            (Some(t.clone()), false)
        );
        assert_eq!(
            extract_token("http://spare.com?id=XYZ&resubmit=true"),
            (Some(t.clone()), true)
        );
        assert_eq!(extract_token("/resource?resubmit=true"), (None, true));
        assert_eq!(extract_token("id=XYZ"), (Some(t), false));
        assert_eq!(extract_token("http://spare.com?id="), (None, false));
    }
}
