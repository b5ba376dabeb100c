//! Frozen text vectors: hash-feature encoder, external-cache adapter, and
//! the `UNITEMB1` binary cache format.
//!
//! The pretrained encoder is never embedded; any tool can produce a cache
//! file and the adapter realigns it to catalog order. The built-in hash
//! encoder is the deterministic desk-scale stand-in: signed feature hashing
//! over word tokens and character 3-grams, unit-normalized.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::data::ItemCatalog;
use crate::error::{Result, UnitError};
use crate::rng::splitmix64;

const MAGIC: &[u8; 8] = b"UNITEMB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    ExternalCache,
    HashFeatures,
}

#[derive(Debug, Clone)]
pub struct TextEncoderSpec {
    pub kind: EncoderKind,
    pub output_dim: usize,
    pub hash_seed: u64,
    /// Source file for the external_cache kind; unused by hash_features.
    pub cache_path: Option<PathBuf>,
}

impl TextEncoderSpec {
    pub fn hash(output_dim: usize, hash_seed: u64) -> Self {
        TextEncoderSpec {
            kind: EncoderKind::HashFeatures,
            output_dim,
            hash_seed,
            cache_path: None,
        }
    }
}

/// Frozen item representations, rows aligned to catalog item_index order.
/// Stored as f32 to match the file format bit-for-bit; training converts to
/// f64 at materialization time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub matrix: Array2<f32>,
    pub ids: Vec<String>,
}

impl EmbeddingCache {
    pub fn n_items(&self) -> usize {
        self.matrix.nrows()
    }
}

fn feature_hash(feature: &str, seed: u64) -> u64 {
    // FNV-1a over the seed bytes then the feature bytes, finalized by a
    // splitmix round so bucket and sign come from well-mixed bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    for &b in feature.as_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

fn accumulate_feature(acc: &mut [f64], feature: &str, seed: u64) {
    let m = feature_hash(feature, seed);
    let bucket = ((m >> 1) % acc.len() as u64) as usize;
    let sign = if m & 1 == 0 { 1.0 } else { -1.0 };
    acc[bucket] += sign;
}

/// Signed feature hashing of lowercase word tokens plus character 3-grams,
/// L2-normalized. All-zero accumulation (empty text, or total sign
/// cancellation) falls back to the unit basis vector at bucket hash("∅").
pub fn hash_encode(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if dim < 8 {
        return Err(UnitError::Usage(format!("hash encoder dim must be >= 8, got {dim}")));
    }
    let mut acc = vec![0.0f64; dim];
    let lower = text.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        accumulate_feature(&mut acc, token, seed);
        let chars: Vec<char> = token.chars().collect();
        for gram in chars.windows(3) {
            let gram: String = gram.iter().collect();
            accumulate_feature(&mut acc, &gram, seed);
        }
    }

    let norm_sq: f64 = acc.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        let m = feature_hash("\u{2205}", seed);
        let bucket = ((m >> 1) % dim as u64) as usize;
        let mut out = vec![0.0f32; dim];
        out[bucket] = 1.0;
        return Ok(out);
    }
    let inv = 1.0 / norm_sq.sqrt();
    Ok(acc.iter().map(|v| (v * inv) as f32).collect())
}

/// One unit-norm row per catalog item in index order. The external kind
/// reads a cache file, realigns rows to catalog order by external id, and
/// re-normalizes on intake.
pub fn encode_corpus(catalog: &ItemCatalog, spec: &TextEncoderSpec) -> Result<EmbeddingCache> {
    if catalog.is_empty() {
        return Err(UnitError::Usage("encode_corpus requires a nonempty catalog".into()));
    }
    match spec.kind {
        EncoderKind::HashFeatures => {
            let mut matrix = Array2::<f32>::zeros((catalog.len(), spec.output_dim));
            for (r, entry) in catalog.items.iter().enumerate() {
                let row = hash_encode(&entry.text, spec.output_dim, spec.hash_seed)?;
                matrix.row_mut(r).assign(&ndarray::ArrayView1::from(&row[..]));
            }
            Ok(EmbeddingCache {
                dim: spec.output_dim,
                matrix,
                ids: catalog.items.iter().map(|e| e.id.clone()).collect(),
            })
        }
        EncoderKind::ExternalCache => {
            let path = spec.cache_path.as_ref().ok_or_else(|| {
                UnitError::Config(
                    "encoder kind external_cache requires a cache file: produce one with any \
                     encoder (format UNITEMB1) and set encoder.cache to its path"
                        .into(),
                )
            })?;
            if !path.exists() {
                return Err(UnitError::Config(format!(
                    "external embedding cache not found at {}: produce one with any encoder \
                     (format UNITEMB1) and point encoder.cache at it",
                    path.display()
                )));
            }
            let raw = read_cache(path)?;
            if raw.dim != spec.output_dim {
                return Err(UnitError::Config(format!(
                    "external cache dim {} does not match encoder output_dim {}",
                    raw.dim, spec.output_dim
                )));
            }
            let by_id: HashMap<&str, usize> =
                raw.ids.iter().enumerate().map(|(r, id)| (id.as_str(), r)).collect();
            let mut matrix = Array2::<f32>::zeros((catalog.len(), raw.dim));
            for (r, entry) in catalog.items.iter().enumerate() {
                let src = *by_id.get(entry.id.as_str()).ok_or_else(|| {
                    UnitError::Data(format!(
                        "external cache is missing item '{}'",
                        entry.id
                    ))
                })?;
                let row = raw.matrix.row(src);
                let norm_sq: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
                if norm_sq == 0.0 {
                    return Err(UnitError::Data(format!(
                        "external cache row for item '{}' is all-zero",
                        entry.id
                    )));
                }
                let inv = 1.0 / norm_sq.sqrt();
                for (c, &v) in row.iter().enumerate() {
                    matrix[(r, c)] = (f64::from(v) * inv) as f32;
                }
            }
            Ok(EmbeddingCache {
                dim: raw.dim,
                matrix,
                ids: catalog.items.iter().map(|e| e.id.clone()).collect(),
            })
        }
    }
}

pub fn cache_to_bytes(cache: &EmbeddingCache) -> Vec<u8> {
    let n = cache.n_items();
    let mut out = Vec::with_capacity(16 + n * cache.dim * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(cache.dim as u32).to_le_bytes());
    for v in cache.matrix.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(cache.ids.len() as u32).to_le_bytes());
    for id in &cache.ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    out
}

pub fn cache_from_bytes(bytes: &[u8], origin: &Path) -> Result<EmbeddingCache> {
    let mut cur = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(UnitError::format(
                origin,
                format!("truncated file: need {n} more bytes for {what}, have {}", cur.len()),
            ));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };

    let magic = take(8, "magic")?;
    if magic != MAGIC {
        return Err(UnitError::format(origin, "bad magic: not a UNITEMB1 cache"));
    }
    let n = u32::from_le_bytes(take(4, "row count")?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(4, "dim")?.try_into().unwrap()) as usize;

    let payload = take(n * dim * 4, "embedding payload")?;
    let mut matrix = Array2::<f32>::zeros((n, dim));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        matrix[(i / dim.max(1), i % dim.max(1))] = f32::from_le_bytes(chunk.try_into().unwrap());
    }

    let id_count = u32::from_le_bytes(take(4, "id count")?.try_into().unwrap()) as usize;
    if id_count != n {
        return Err(UnitError::format(
            origin,
            format!("id count {id_count} does not match row count {n}"),
        ));
    }
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let len = u32::from_le_bytes(take(4, "id length")?.try_into().unwrap()) as usize;
        let raw = take(len, "id bytes")?;
        let id = std::str::from_utf8(raw)
            .map_err(|_| UnitError::format(origin, format!("id {i} is not valid UTF-8")))?;
        ids.push(id.to_string());
    }
    if !cur.is_empty() {
        return Err(UnitError::format(
            origin,
            format!("{} trailing bytes after id index", cur.len()),
        ));
    }
    Ok(EmbeddingCache { dim, matrix, ids })
}

pub fn write_cache(cache: &EmbeddingCache, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = cache_to_bytes(cache);
    let mut file = std::fs::File::create(path).map_err(|e| UnitError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| UnitError::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<EmbeddingCache> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| UnitError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| UnitError::io(path, e))?;
    cache_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CatalogEntry;

    fn catalog(texts: &[&str]) -> ItemCatalog {
        ItemCatalog {
            items: texts
                .iter()
                .enumerate()
                .map(|(i, t)| CatalogEntry { index: i, id: format!("it{i}"), text: t.to_string() })
                .collect(),
        }
    }

    /// Independent scalar re-statement of the hashing rule, used as the
    /// oracle for hash_encode. Kept deliberately naive.
    fn naive_hash_encode(text: &str, dim: usize, seed: u64) -> Vec<f64> {
        fn hash(feature: &str, seed: u64) -> u64 {
            let mut h: u64 = 0xcbf29ce484222325;
            let mut eat = |byte: u8| h = (h ^ byte as u64).wrapping_mul(0x100000001b3);
            seed.to_le_bytes().iter().for_each(|&b| eat(b));
            feature.bytes().for_each(&mut eat);
            // splitmix64 finaler, restated
            let mut x = h.wrapping_add(0x9e3779b97f4a7c15);
            x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
            x ^ (x >> 31)
        }
        let mut features: Vec<String> = Vec::new();
        for token in text.to_lowercase().split(|c: char| !c.is_alphanumeric()) {
            if token.is_empty() {
                continue;
            }
            features.push(token.to_string());
            let cs: Vec<char> = token.chars().collect();
            for w in 0..cs.len().saturating_sub(2) {
                features.push(cs[w..w + 3].iter().collect());
            }
        }
        let mut acc = vec![0.0f64; dim];
        for f in &features {
            let m = hash(f, seed);
            let b = ((m >> 1) % dim as u64) as usize;
            acc[b] += if m & 1 == 0 { 1.0 } else { -1.0 };
        }
        let n: f64 = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            let m = hash("\u{2205}", seed);
            acc[((m >> 1) % dim as u64) as usize] = 1.0;
            return acc;
        }
        acc.iter().map(|v| v / n).collect()
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        dot
    }

    #[test]
    fn hash_encode_is_deterministic_and_unit_norm() {
        let a = hash_encode("The Quick, Brown Fox!", 64, 7).unwrap();
        let b = hash_encode("The Quick, Brown Fox!", 64, 7).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hash_encode_matches_naive_reference() {
        for (text, seed) in [
            ("garden hose and sprinkler", 1u64),
            ("alpha", 42),
            ("Multi  spaced --- punctuation;;; marks", 9),
        ] {
            let got = hash_encode(text, 32, seed).unwrap();
            let want = naive_hash_encode(text, 32, seed);
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-6, "{text}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn near_duplicate_texts_are_similar_but_not_identical() {
        let a = hash_encode("alpha", 64, 3).unwrap();
        let b = hash_encode("alphb", 64, 3).unwrap();
        let near = cosine(&a, &b);
        assert!(near > 0.0 && near < 1.0, "cosine {near}");
        // Unrelated texts should sit well below the near-duplicate pair.
        let c = hash_encode("zygote formation护", 64, 3).unwrap();
        let far = cosine(&a, &c);
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn empty_text_hits_fallback_basis_vector() {
        let v = hash_encode("", 16, 5).unwrap();
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(v.iter().map(|&x| x * x).sum::<f32>(), 1.0);
        // Punctuation-only text tokenizes to nothing: same fallback.
        assert_eq!(hash_encode("?!...", 16, 5).unwrap(), v);
    }

    #[test]
    fn dim_below_eight_is_rejected() {
        assert!(hash_encode("x", 7, 0).is_err());
    }

    #[test]
    fn encode_corpus_shapes_and_norms() {
        let cache = encode_corpus(&catalog(&["red", "green", "blue"]), &TextEncoderSpec::hash(64, 11)).unwrap();
        assert_eq!(cache.matrix.dim(), (3, 64));
        for row in cache.matrix.rows() {
            let norm: f64 = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_corpus_is_byte_identical_across_calls() {
        let cat = catalog(&["one fish", "two fish"]);
        let spec = TextEncoderSpec::hash(32, 123);
        let a = cache_to_bytes(&encode_corpus(&cat, &spec).unwrap());
        let b = cache_to_bytes(&encode_corpus(&cat, &spec).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn encode_corpus_rejects_empty_catalog() {
        let empty = ItemCatalog { items: vec![] };
        assert!(encode_corpus(&empty, &TextEncoderSpec::hash(32, 0)).is_err());
    }

    #[test]
    fn external_cache_realigns_and_reports_missing_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.bin");
        // External cache in reverse order with an extra id.
        let mut matrix = Array2::<f32>::zeros((3, 8));
        matrix[(0, 0)] = 2.0; // it1 row, non-unit on purpose
        matrix[(1, 1)] = 1.0; // it0 row
        matrix[(2, 2)] = 1.0; // unrelated row
        let ext = EmbeddingCache {
            dim: 8,
            matrix,
            ids: vec!["it1".into(), "it0".into(), "other".into()],
        };
        write_cache(&ext, &path).unwrap();

        let cat = catalog(&["a", "b"]);
        let spec = TextEncoderSpec {
            kind: EncoderKind::ExternalCache,
            output_dim: 8,
            hash_seed: 0,
            cache_path: Some(path.clone()),
        };
        let aligned = encode_corpus(&cat, &spec).unwrap();
        assert_eq!(aligned.ids, vec!["it0".to_string(), "it1".to_string()]);
        // it1's row was re-normalized from length 2 to length 1.
        assert_eq!(aligned.matrix[(1, 0)], 1.0);
        assert_eq!(aligned.matrix[(0, 1)], 1.0);

        let cat3 = catalog(&["a", "b", "c"]); // it2 absent from the external file
        let err = encode_corpus(&cat3, &spec).unwrap_err().to_string();
        assert!(err.contains("it2"), "{err}");
    }

    #[test]
    fn external_cache_missing_file_instructs_user() {
        let cat = catalog(&["a"]);
        let spec = TextEncoderSpec {
            kind: EncoderKind::ExternalCache,
            output_dim: 8,
            hash_seed: 0,
            cache_path: Some(PathBuf::from("/nonexistent/cache.bin")),
        };
        let err = encode_corpus(&cat, &spec).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("UNITEMB1"), "{err}");
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut matrix = Array2::<f32>::zeros((5, 16));
        let mut s = 0x12345u64;
        for v in matrix.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            *v = f32::from_bits(0x3f00_0000 | ((s >> 40) as u32 & 0x7f_ffff));
        }
        let cache = EmbeddingCache {
            dim: 16,
            matrix,
            ids: (0..5).map(|i| format!("id-{i}")).collect(),
        };
        write_cache(&cache, &path).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back, cache);
    }

    #[test]
    fn corrupted_files_give_distinct_errors() {
        let cache = EmbeddingCache {
            dim: 8,
            matrix: Array2::<f32>::ones((2, 8)),
            ids: vec!["a".into(), "b".into()],
        };
        let good = cache_to_bytes(&cache);
        let p = Path::new("test.bin");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = cache_from_bytes(&bad_magic, p).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        // Header claims 10 rows but payload holds 2.
        let mut short = good.clone();
        short[8..12].copy_from_slice(&10u32.to_le_bytes());
        let err = cache_from_bytes(&short, p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let truncated = &good[..good.len() - 3];
        let err = cache_from_bytes(truncated, p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        // Id count header inconsistent with row count.
        let id_count_at = 16 + 2 * 8 * 4;
        let mut mismatch = good.clone();
        mismatch[id_count_at..id_count_at + 4].copy_from_slice(&7u32.to_le_bytes());
        let err = cache_from_bytes(&mismatch, p).unwrap_err().to_string();
        assert!(err.contains("id count"), "{err}");

        let mut trailing = good.clone();
        trailing.push(0);
        let err = cache_from_bytes(&trailing, p).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }
}
