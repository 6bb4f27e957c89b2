//! Model files: one JSON header line, then the binary chain.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use snf_core::experiment::ExperimentConfig;
use snf_core::Chain;

const FORMAT: &str = "snf-model";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: ExperimentConfig,
    payload_bytes: usize,
    payload_sha256: String,
}

pub struct ModelFile {
    pub config: ExperimentConfig,
    pub chain: Chain,
    /// SHA-256 of the whole file.
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(config: &ExperimentConfig, chain: &Chain) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    chain.write_to(&mut payload)?;
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: config.clone(),
        payload_bytes: payload.len(),
        payload_sha256: sha256_hex(&payload),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save(path: &Path, config: &ExperimentConfig, chain: &Chain) -> Result<String> {
    let bytes = encode(config, chain)?;
    fs::write(path, &bytes).with_context(|| format!("writing model {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn decode(bytes: &[u8]) -> Result<ModelFile> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .context("model file has no header line")?;
    let header: Header = serde_json::from_slice(&bytes[..split]).context("model header")?;
    ensure!(header.format == FORMAT, "not a model file (format {:?})", header.format);
    ensure!(header.version == VERSION, "unsupported model version {}", header.version);
    let payload = &bytes[split + 1..];
    ensure!(
        payload.len() == header.payload_bytes,
        "model payload is {} bytes, header says {}",
        payload.len(),
        header.payload_bytes
    );
    if sha256_hex(payload) != header.payload_sha256 {
        bail!("model payload hash does not match its header");
    }
    let chain = Chain::read_from(&mut &payload[..])?;
    header.config.validate()?;
    Ok(ModelFile {
        config: header.config,
        chain,
        sha256: sha256_hex(bytes),
    })
}

pub fn load(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading model {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use snf_core::experiment::Experiment;

    fn small() -> (ExperimentConfig, Chain) {
        let mut cfg = ExperimentConfig::mixture_desk_flow_only();
        cfg.problem = snf_core::experiment::ProblemConfig::LinearGaussian {
            dim: 2,
            components: 2,
            component_var: 0.05,
            operator_scale: 0.5,
            noise_var: 0.05,
            weights: None,
        };
        let chain = Experiment::build(cfg.clone()).unwrap().new_chain().unwrap();
        (cfg, chain)
    }

    #[test]
    fn round_trip() {
        let (cfg, chain) = small();
        let bytes = encode(&cfg, &chain).unwrap();
        let m = decode(&bytes).unwrap();
        assert_eq!(m.config, cfg);
        assert_eq!(m.chain, chain);
        assert_eq!(m.sha256, sha256_hex(&bytes));
    }

    #[test]
    fn corruption_is_detected() {
        let (cfg, chain) = small();
        let mut bytes = encode(&cfg, &chain).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(decode(&bytes).is_err());
        let bytes = encode(&cfg, &chain).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"not a model").is_err());
    }
}
