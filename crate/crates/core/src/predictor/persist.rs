//! Model files: `MAGIC`, a little-endian `u32` version, a `u64` header
//! length, a JSON header, then the parameter payload as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forest::TreeNode;
use super::lstm::LayerShape;
use super::{
    ForestConfig, ForestModel, LinearModel, LstmNet, ModelParams, PredictorError, PredictorKind, PredictorModel,
    RecurrentNetConfig, RegressionTree, Scaler, TrainReport,
};
use crate::kinematics::NodeKind;

pub const MAGIC: &[u8; 8] = b"AOIPRED\0";
pub const FORMAT_VERSION: u32 = 1;

/// Floats per serialized tree node: feature, threshold, left, right, value.
const TREE_NODE_FLOATS: usize = 5;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: PredictorKind,
    node_kind: Option<NodeKind>,
    window: usize,
    horizon: usize,
    train_report: TrainReport,
    payload_len: usize,
    detail: Detail,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Detail {
    Linear {
        features: usize,
        ridge_used: bool,
    },
    Recurrent {
        layers: Vec<LayerShape>,
        scaler: Scaler,
        config: Option<RecurrentNetConfig>,
    },
    Forest {
        config: ForestConfig,
        tree_sizes: Vec<usize>,
    },
}

fn fmt_err(m: impl Into<String>) -> PredictorError {
    PredictorError::Format(m.into())
}

pub fn write_model<W: Write>(model: &PredictorModel, mut out: W) -> Result<(), PredictorError> {
    let (detail, payload): (Detail, Vec<f64>) = match &model.params {
        ModelParams::Linear(m) => {
            let mut p = m.feature_mean.clone();
            p.extend(&m.feature_std);
            p.extend(&m.weights);
            p.push(m.intercept);
            (
                Detail::Linear {
                    features: m.weights.len(),
                    ridge_used: m.ridge_used,
                },
                p,
            )
        }
        ModelParams::Recurrent(n) => (
            Detail::Recurrent {
                layers: n.layers.clone(),
                scaler: n.scaler.clone(),
                config: n.config.clone(),
            },
            n.params.clone(),
        ),
        ModelParams::Forest(f) => {
            let mut p = Vec::new();
            for t in &f.trees {
                for n in &t.nodes {
                    let feature = if n.is_leaf() { -1.0 } else { n.feature as f64 };
                    p.extend([feature, n.threshold, n.left as f64, n.right as f64, n.value]);
                }
            }
            (
                Detail::Forest {
                    config: f.config,
                    tree_sizes: f.trees.iter().map(|t| t.nodes.len()).collect(),
                },
                p,
            )
        }
    };
    let header = Header {
        kind: model.kind,
        node_kind: model.node_kind,
        window: model.window,
        horizon: model.horizon,
        train_report: model.train_report.clone(),
        payload_len: payload.len(),
        detail,
    };
    let json = serde_json::to_vec(&header).map_err(|e| fmt_err(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for v in payload {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<PredictorModel, PredictorError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt_err("not a model file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    if len > 64 << 20 {
        return Err(fmt_err("header too large"));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| fmt_err(format!("header: {e}")))?;
    let mut payload = Vec::with_capacity(header.payload_len.min(1 << 24));
    for _ in 0..header.payload_len {
        input.read_exact(&mut b8)?;
        payload.push(f64::from_le_bytes(b8));
    }

    let params = match header.detail {
        Detail::Linear { features, ridge_used } => {
            if payload.len() != 3 * features + 1 {
                return Err(fmt_err("linear payload length mismatch"));
            }
            ModelParams::Linear(LinearModel {
                feature_mean: payload[..features].to_vec(),
                feature_std: payload[features..2 * features].to_vec(),
                weights: payload[2 * features..3 * features].to_vec(),
                intercept: payload[3 * features],
                ridge_used,
            })
        }
        Detail::Recurrent { layers, scaler, config } => {
            let (Some(first), Some(last)) = (layers.first(), layers.last()) else {
                return Err(fmt_err("recurrent net without layers"));
            };
            let mut net = LstmNet::new_zeroed(first.input, last.hidden, layers.len());
            if net.layers != layers || net.params.len() != payload.len() {
                return Err(fmt_err("recurrent payload does not match layer shapes"));
            }
            net.params = payload;
            net.scaler = scaler;
            net.config = config;
            ModelParams::Recurrent(net)
        }
        Detail::Forest { config, tree_sizes } => {
            if tree_sizes.iter().sum::<usize>() * TREE_NODE_FLOATS != payload.len() || tree_sizes.is_empty() {
                return Err(fmt_err("forest payload length mismatch"));
            }
            let mut chunks = payload.chunks_exact(TREE_NODE_FLOATS);
            let mut trees = Vec::with_capacity(tree_sizes.len());
            for size in tree_sizes {
                let nodes: Vec<TreeNode> = chunks
                    .by_ref()
                    .take(size)
                    .map(|c| TreeNode {
                        feature: if c[0] < 0.0 { usize::MAX } else { c[0] as usize },
                        threshold: c[1],
                        left: c[2] as usize,
                        right: c[3] as usize,
                        value: c[4],
                    })
                    .collect();
                if nodes.is_empty()
                    || nodes
                        .iter()
                        .any(|n| !n.is_leaf() && (n.left >= size || n.right >= size))
                {
                    return Err(fmt_err("forest node index out of range"));
                }
                trees.push(RegressionTree { nodes });
            }
            ModelParams::Forest(ForestModel { config, trees })
        }
    };
    let kind_ok = matches!(
        (&params, header.kind),
        (ModelParams::Linear(_), PredictorKind::Linear)
            | (ModelParams::Recurrent(_), PredictorKind::Recurrent)
            | (ModelParams::Forest(_), PredictorKind::TreeEnsemble)
    );
    if !kind_ok {
        return Err(fmt_err("header kind does not match parameters"));
    }
    Ok(PredictorModel {
        kind: header.kind,
        node_kind: header.node_kind,
        window: header.window,
        horizon: header.horizon,
        params,
        train_report: header.train_report,
    })
}

pub fn save_model(model: &PredictorModel, path: &Path) -> Result<(), PredictorError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PredictorModel, PredictorError> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{train_forest, train_linear, train_recurrent};
    use super::*;

    fn roundtrip(m: &PredictorModel) -> PredictorModel {
        let mut buf = Vec::new();
        write_model(m, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        read_model(buf.as_slice()).unwrap()
    }

    #[test]
    fn all_kinds_roundtrip_bit_exact() {
        let ds = dataset(synthetic(60, 3, 1, |v| v * v), vec![], 3, 2);
        let lin = train_linear(&ds).unwrap();
        assert_eq!(roundtrip(&lin), lin);
        let cfg = RecurrentNetConfig {
            units_per_layer: 3,
            layers: 2,
            epochs: 1,
            ..RecurrentNetConfig::default()
        };
        let rnn = train_recurrent(&ds, &cfg, 1).unwrap();
        assert_eq!(roundtrip(&rnn), rnn);
        let f = train_forest(
            &ds,
            &ForestConfig {
                trees: 3,
                ..ForestConfig::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(roundtrip(&f), f);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let ds = dataset(synthetic(10, 1, 1, |v| v), vec![], 1, 1);
        let mut buf = Vec::new();
        write_model(&train_linear(&ds).unwrap(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(bad.as_slice()), Err(PredictorError::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 99;
        assert!(matches!(read_model(bad.as_slice()), Err(PredictorError::Format(_))));
        assert!(read_model(&buf[..buf.len() - 3]).is_err());
    }
}
