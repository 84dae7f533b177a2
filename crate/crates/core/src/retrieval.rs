//! Embedding library and mixture queries.
//!
//! Each output slot of the multi encoder picks the library instrument with
//! the highest cosine similarity; the retrieved set is the union of picks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::MelFrontEnd;
use crate::encoder::{EncoderError, MultiEncoder, Scalar, SingleEncoder};
use crate::pit::{cosine, PitError};
use crate::synth::{AudioClip, Family};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("library has no instruments")]
    EmptyLibrary,
    #[error("zero vector in {0}")]
    ZeroVector(String),
    #[error("embedding width {got} does not match the library width {want}")]
    DimensionMismatch { want: usize, got: usize },
    #[error("instrument `{0}` listed under two families")]
    InconsistentFamily(String),
    #[error("malformed library file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<crate::dsp::DspError> for RetrievalError {
    fn from(e: crate::dsp::DspError) -> Self {
        RetrievalError::Encoder(e.into())
    }
}

/// Where the library vectors came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_hash: String,
    pub clips: Vec<String>,
}

/// One embedding per instrument, rows of `vectors` in `ids` order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingLibrary {
    pub ids: Vec<String>,
    pub families: Vec<Family>,
    pub vectors: Array2<f32>,
    pub provenance: Provenance,
}

/// A library clip with its instrument label.
#[derive(Clone, Copy, Debug)]
pub struct LibraryClip<'a> {
    pub instrument: &'a str,
    pub family: Family,
    pub name: &'a str,
    pub clip: &'a AudioClip,
}

const LIBRARY_MAGIC: &[u8; 8] = b"INSTLIB1";

#[derive(Serialize, Deserialize)]
struct LibraryHeader {
    ids: Vec<String>,
    families: Vec<Family>,
    dim: usize,
    dtype: String,
    provenance: Provenance,
}

impl EmbeddingLibrary {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn family_map(&self) -> BTreeMap<String, Family> {
        self.ids.iter().cloned().zip(self.families.iter().copied()).collect()
    }

    /// Build from explicit vectors, checking the invariants.
    pub fn from_vectors(
        ids: Vec<String>,
        families: Vec<Family>,
        vectors: Array2<f32>,
        provenance: Provenance,
    ) -> Result<Self, RetrievalError> {
        if ids.is_empty() {
            return Err(RetrievalError::EmptyLibrary);
        }
        if families.len() != ids.len() || vectors.nrows() != ids.len() {
            return Err(RetrievalError::Malformed(format!(
                "{} ids, {} families, {} vectors",
                ids.len(),
                families.len(),
                vectors.nrows()
            )));
        }
        let mut seen = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if seen.insert(id.as_str(), i).is_some() {
                return Err(RetrievalError::Malformed(format!("duplicate id `{id}`")));
            }
            let row = vectors.row(i);
            if !row.iter().all(|v| v.is_finite()) {
                return Err(RetrievalError::Malformed(format!("non-finite vector for `{id}`")));
            }
            if row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt() < crate::pit::MIN_NORM {
                return Err(RetrievalError::ZeroVector(format!("library entry `{id}`")));
            }
        }
        Ok(EmbeddingLibrary {
            ids,
            families,
            vectors,
            provenance,
        })
    }

    /// Magic, header length (u64 LE), JSON header, then the `K × D` matrix as LE `f32`.
    pub fn write(&self, path: &Path) -> Result<(), RetrievalError> {
        let header = serde_json::to_vec(&LibraryHeader {
            ids: self.ids.clone(),
            families: self.families.clone(),
            dim: self.dim(),
            dtype: "float32_le".into(),
            provenance: self.provenance.clone(),
        })?;
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        out.write_all(LIBRARY_MAGIC)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for v in self.vectors.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = fs::read(path)?;
        let malformed = |m: &str| RetrievalError::Malformed(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != LIBRARY_MAGIC {
            return Err(malformed("missing library magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| malformed("truncated"))?;
        if len > body.len() {
            return Err(malformed("header runs past the end of the file"));
        }
        let header: LibraryHeader = serde_json::from_slice(&body[..len])?;
        let data = &body[len..];
        let k = header.ids.len();
        if data.len() != k * header.dim * 4 {
            return Err(malformed("matrix size does not match the header"));
        }
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let vectors = Array2::from_shape_vec((k, header.dim), values).map_err(|e| malformed(&e.to_string()))?;
        Self::from_vectors(header.ids, header.families, vectors, header.provenance)
    }
}

/// Mean single-encoder embedding per instrument, in order of first appearance.
pub fn build_library<F: Scalar>(
    encoder: &SingleEncoder<F>,
    clips: &[LibraryClip<'_>],
    checkpoint_hash: &str,
) -> Result<EmbeddingLibrary, RetrievalError> {
    if clips.is_empty() {
        return Err(RetrievalError::EmptyLibrary);
    }
    let front = MelFrontEnd::new(encoder.config.mel.clone())?;
    let embeddings: Vec<Array1<F>> = clips
        .par_iter()
        .map(|c| Ok(encoder.embed(&front.log_mel(c.clip)?)?))
        .collect::<Result<_, RetrievalError>>()?;
    let mut ids: Vec<String> = Vec::new();
    let mut families = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        let k = *slot.entry(c.instrument).or_insert_with(|| {
            ids.push(c.instrument.to_string());
            families.push(c.family);
            members.push(Vec::new());
            ids.len() - 1
        });
        if families[k] != c.family {
            return Err(RetrievalError::InconsistentFamily(c.instrument.to_string()));
        }
        members[k].push(i);
    }
    let dim = encoder.embedding_dim();
    let mut vectors = Array2::<f32>::zeros((ids.len(), dim));
    for (k, m) in members.iter().enumerate() {
        for j in 0..dim {
            let sum: f64 = m.iter().map(|&i| embeddings[i][j].as_f64()).sum();
            vectors[[k, j]] = (sum / m.len() as f64) as f32;
        }
    }
    let provenance = Provenance {
        checkpoint_hash: checkpoint_hash.to_string(),
        clips: clips.iter().map(|c| c.name.to_string()).collect(),
    };
    EmbeddingLibrary::from_vectors(ids, families, vectors, provenance)
}

/// `values[(j, k)]` is the cosine between output slot `j` and library entry `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
}

pub fn similarity_matrix(outputs: ArrayView2<'_, f64>, library: &EmbeddingLibrary) -> Result<SimilarityMatrix, RetrievalError> {
    if outputs.ncols() != library.dim() {
        return Err(RetrievalError::DimensionMismatch {
            want: library.dim(),
            got: outputs.ncols(),
        });
    }
    let lib = library.vectors.mapv(f64::from);
    let mut values = Array2::zeros((outputs.nrows(), library.len()));
    for (j, out) in outputs.rows().into_iter().enumerate() {
        for (k, entry) in lib.rows().into_iter().enumerate() {
            values[[j, k]] = cosine(out, entry).map_err(|e| match e {
                PitError::ZeroVector => RetrievalError::ZeroVector(format!("output slot {j}")),
                other => RetrievalError::Malformed(other.to_string()),
            })?;
        }
    }
    Ok(SimilarityMatrix { values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotPick {
    pub slot: usize,
    pub index: usize,
    pub id: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Distinct picked ids in order of first pick.
    pub retrieved: Vec<String>,
    pub per_slot: Vec<SlotPick>,
    /// Highest similarity any slot gives each library instrument.
    pub instrument_scores: Vec<f64>,
}

/// Row-wise arg-max (lowest index on ties) and column-wise maxima.
pub fn retrieve(sim: &SimilarityMatrix, ids: &[String]) -> RetrievalResult {
    let (m, k) = sim.values.dim();
    assert_eq!(k, ids.len(), "similarity columns must match library ids");
    let mut per_slot = Vec::with_capacity(m);
    let mut retrieved: Vec<String> = Vec::new();
    for (j, row) in sim.values.rows().into_iter().enumerate() {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if !retrieved.contains(&ids[best]) {
            retrieved.push(ids[best].clone());
        }
        per_slot.push(SlotPick {
            slot: j,
            index: best,
            id: ids[best].clone(),
            similarity: row[best],
        });
    }
    let instrument_scores = sim
        .values
        .columns()
        .into_iter()
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    RetrievalResult {
        retrieved,
        per_slot,
        instrument_scores,
    }
}

/// The `k` best `(id, similarity)` pairs of every slot, best first, ties by index.
pub fn top_k(sim: &SimilarityMatrix, ids: &[String], k: usize) -> Vec<Vec<(String, f64)>> {
    sim.values
        .rows()
        .into_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.into_iter().take(k).map(|i| (ids[i].clone(), row[i])).collect()
        })
        .collect()
}

/// Log-mel, multi-encoder forward, similarities and per-slot picks.
pub fn query<F: Scalar>(
    encoder: &MultiEncoder<F>,
    library: &EmbeddingLibrary,
    mixture: &AudioClip,
) -> Result<(RetrievalResult, SimilarityMatrix), RetrievalError> {
    let outputs = encoder.embed_clip(mixture)?.mapv(|v| v.as_f64());
    let sim = similarity_matrix(outputs.view(), library)?;
    Ok((retrieve(&sim, &library.ids), sim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{}", i + 1)).collect()
    }

    #[test]
    fn duplicate_picks_collapse() {
        let r = retrieve(&SimilarityMatrix { values: array![[0.9, 0.1], [0.8, 0.2]] }, &ids(2));
        assert_eq!(r.retrieved, vec!["l1"]);
        assert_eq!(r.instrument_scores, vec![0.9, 0.2]);
    }

    #[test]
    fn distinct_picks() {
        let r = retrieve(&SimilarityMatrix { values: array![[0.2, 0.9], [0.7, 0.1]] }, &ids(2));
        assert_eq!(r.retrieved, vec!["l2", "l1"]);
    }

    #[test]
    fn tie_takes_lowest_index() {
        let r = retrieve(&SimilarityMatrix { values: array![[0.5, 0.5]] }, &ids(2));
        assert_eq!(r.retrieved, vec!["l1"]);
    }

    #[test]
    fn identity_and_orthogonality() {
        let lib = EmbeddingLibrary::from_vectors(
            ids(2),
            vec![Family::Bass, Family::Organ],
            array![[1.0f32, 0.0], [0.0, 3.0]],
            Provenance::default(),
        )
        .unwrap();
        let sim = similarity_matrix(array![[1.0, 0.0]].view(), &lib).unwrap();
        assert_eq!(sim.values, array![[1.0, 0.0]]);
        assert!(matches!(
            similarity_matrix(array![[0.0, 0.0]].view(), &lib),
            Err(RetrievalError::ZeroVector(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.bin");
        let lib = EmbeddingLibrary::from_vectors(
            ids(3),
            vec![Family::Bass, Family::Organ, Family::Bass],
            array![[1.0f32, 0.5], [0.0, 3.0], [-1.0, 2.0]],
            Provenance {
                checkpoint_hash: "abc".into(),
                clips: vec!["x.wav".into()],
            },
        )
        .unwrap();
        lib.write(&path).unwrap();
        assert_eq!(EmbeddingLibrary::read(&path).unwrap(), lib);
    }

    #[test]
    fn rejects_bad_libraries() {
        assert!(matches!(
            EmbeddingLibrary::from_vectors(vec![], vec![], Array2::zeros((0, 2)), Provenance::default()),
            Err(RetrievalError::EmptyLibrary)
        ));
        assert!(matches!(
            EmbeddingLibrary::from_vectors(ids(1), vec![Family::Bass], Array2::zeros((1, 2)), Provenance::default()),
            Err(RetrievalError::ZeroVector(_))
        ));
    }
}
