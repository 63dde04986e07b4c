//! Visual features: the three input types, their canonical matrix forms
//! for attention/conditioning, and the binary feature-file format.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AVGPOOL_DIM: usize = 2048;
pub const AVGPOOL_ROWS: usize = 32;
pub const AVGPOOL_COLS: usize = 64;
pub const CONV_SPATIAL: usize = 7;
pub const CONV_CHANNELS: usize = 2048;
pub const CONV_ROWS: usize = CONV_SPATIAL * CONV_SPATIAL;
pub const N_ACTION_CATEGORIES: usize = 339;
pub const TEN_HOT_K: usize = 10;

const MAGIC: &[u8] = b"MMFEAT1\n";

/// Which feature type a file or tensor carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureTag {
    AvgPool,
    Conv,
    ActionScores,
}

impl FeatureTag {
    pub fn name(self) -> &'static str {
        match self {
            FeatureTag::AvgPool => "avgpool",
            FeatureTag::Conv => "conv",
            FeatureTag::ActionScores => "actions",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "avgpool" => Ok(FeatureTag::AvgPool),
            "conv" => Ok(FeatureTag::Conv),
            "actions" => Ok(FeatureTag::ActionScores),
            other => Err(Error::Format(format!("unknown feature tag {other:?}"))),
        }
    }

    pub fn dims(self) -> Vec<usize> {
        match self {
            FeatureTag::AvgPool => vec![AVGPOOL_DIM],
            FeatureTag::Conv => vec![CONV_SPATIAL, CONV_SPATIAL, CONV_CHANNELS],
            FeatureTag::ActionScores => vec![N_ACTION_CATEGORIES],
        }
    }

    /// Attention-row count of the derived visual context.
    pub fn context_rows(self) -> usize {
        match self {
            FeatureTag::AvgPool => AVGPOOL_ROWS,
            FeatureTag::Conv => CONV_ROWS,
            FeatureTag::ActionScores => N_ACTION_CATEGORIES,
        }
    }
}

/// One video's features, in exactly one of the three canonical forms.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualFeature {
    /// Pooled 2048-D vector.
    AvgPool(Vec<f32>),
    /// 7x7x2048 convolutional map, row-major over (row, col, channel).
    Conv(Vec<f32>),
    /// Scores over the 339 action categories.
    ActionScores(Vec<f32>),
}

impl VisualFeature {
    pub fn tag(&self) -> FeatureTag {
        match self {
            VisualFeature::AvgPool(_) => FeatureTag::AvgPool,
            VisualFeature::Conv(_) => FeatureTag::Conv,
            VisualFeature::ActionScores(_) => FeatureTag::ActionScores,
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            VisualFeature::AvgPool(v) | VisualFeature::Conv(v) | VisualFeature::ActionScores(v) => v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expect: usize = self.tag().dims().iter().product();
        let got = self.values().len();
        if got != expect {
            return Err(Error::shape(format!(
                "{} feature has {got} values, expected {expect}",
                self.tag().name()
            )));
        }
        if !self.values().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{} feature", self.tag().name())));
        }
        Ok(())
    }
}

/// Matrix of attention keys/values derived from one feature, tagged with
/// its origin. Row count is fixed per origin: 32 / 49 / 339.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualContext {
    pub origin: FeatureTag,
    pub matrix: Tensor<f32>,
}

impl VisualContext {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// Row-major reshape of the 2048-D pooled vector into 32 x 64:
/// `out[i][j] = f[64*i + j]`.
pub fn avgpool_to_matrix(feature: &VisualFeature) -> Result<VisualContext> {
    let VisualFeature::AvgPool(values) = feature else {
        return Err(Error::shape(format!(
            "avgpool_to_matrix on {} feature",
            feature.tag().name()
        )));
    };
    if values.len() != AVGPOOL_DIM {
        return Err(Error::shape(format!(
            "avgpool vector has {} values, expected {AVGPOOL_DIM}",
            values.len()
        )));
    }
    Ok(VisualContext {
        origin: FeatureTag::AvgPool,
        matrix: Tensor::new(vec![AVGPOOL_ROWS, AVGPOOL_COLS], values.clone())?,
    })
}

/// Flatten the 7x7 spatial grid row-major into 49 region rows, keeping each
/// region's 2048-channel vector: region (r, c) becomes row `7r + c`.
pub fn conv_to_regions(feature: &VisualFeature) -> Result<VisualContext> {
    let VisualFeature::Conv(values) = feature else {
        return Err(Error::shape(format!(
            "conv_to_regions on {} feature",
            feature.tag().name()
        )));
    };
    if values.len() != CONV_ROWS * CONV_CHANNELS {
        return Err(Error::shape(format!(
            "conv map has {} values, expected {}",
            values.len(),
            CONV_ROWS * CONV_CHANNELS
        )));
    }
    // (row, col, channel) row-major means the data is already contiguous
    // per region; only the logical shape changes.
    Ok(VisualContext {
        origin: FeatureTag::Conv,
        matrix: Tensor::new(vec![CONV_ROWS, CONV_CHANNELS], values.clone())?,
    })
}

/// Indices of the 10 highest scores; ties break toward the lower index.
pub fn top_k_categories(scores: &[f32]) -> Result<Vec<usize>> {
    if scores.len() != N_ACTION_CATEGORIES {
        return Err(Error::shape(format!(
            "action scores have {} values, expected {N_ACTION_CATEGORIES}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(TEN_HOT_K);
    Ok(order)
}

/// 0/1 row-keep mask over the 339 categories for the ten-hot selection.
pub fn ten_hot_mask(feature: &VisualFeature) -> Result<Vec<f32>> {
    let VisualFeature::ActionScores(scores) = feature else {
        return Err(Error::shape(format!(
            "ten_hot on {} feature",
            feature.tag().name()
        )));
    };
    let keep = top_k_categories(scores)?;
    let mut mask = vec![0.0f32; N_ACTION_CATEGORIES];
    for i in keep {
        mask[i] = 1.0;
    }
    Ok(mask)
}

/// Ten-hot embedding matrix: row c of `table` is kept when c is among the
/// 10 highest scores, otherwise zeroed.
pub fn ten_hot(feature: &VisualFeature, table: &Tensor<f32>) -> Result<VisualContext> {
    if table.rank() != 2 || table.shape()[0] != N_ACTION_CATEGORIES {
        return Err(Error::shape(format!(
            "action embedding table must be [{N_ACTION_CATEGORIES}, d], got {:?}",
            table.shape()
        )));
    }
    let mask = ten_hot_mask(feature)?;
    let d = table.shape()[1];
    let mut out = Tensor::zeros(table.shape());
    for (r, keep) in mask.iter().enumerate() {
        if *keep != 0.0 {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&table.data()[r * d..(r + 1) * d]);
        }
    }
    Ok(VisualContext {
        origin: FeatureTag::ActionScores,
        matrix: out,
    })
}

/// Write features: magic, ASCII header "tag n dim0[,dim1,dim2]", then
/// little-endian f32 payloads, one record per corpus line.
pub fn write_features(path: &Path, tag: FeatureTag, features: &[VisualFeature]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    let dims = tag
        .dims()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    writeln!(out, "{} {} {}", tag.name(), features.len(), dims)?;
    for f in features {
        if f.tag() != tag {
            return Err(Error::Format(format!(
                "feature of type {} in a {} file",
                f.tag().name(),
                tag.name()
            )));
        }
        f.validate()?;
        for v in f.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_features(path: &Path, tag: FeatureTag) -> Result<Vec<VisualFeature>> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!(
            "{}: missing MMFEAT1 magic",
            path.display()
        )));
    }
    let rest = &bytes[MAGIC.len()..];
    let header_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: unterminated header", path.display())))?;
    let header = std::str::from_utf8(&rest[..header_end])
        .map_err(|_| Error::Format(format!("{}: header is not UTF-8", path.display())))?;
    let mut parts = header.split(' ');
    let (tag_s, n_s, dims_s) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(t), Some(n), Some(d), None) => (t, n, d),
        _ => {
            return Err(Error::Format(format!(
                "{}: header must be \"tag n dims\", got {header:?}",
                path.display()
            )))
        }
    };
    let file_tag = FeatureTag::parse(tag_s)?;
    if file_tag != tag {
        return Err(Error::Format(format!(
            "{}: contains {} features, expected {}",
            path.display(),
            file_tag.name(),
            tag.name()
        )));
    }
    let n: usize = n_s
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad count {n_s:?}", path.display())))?;
    let dims: Vec<usize> = dims_s
        .split(',')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Format(format!("{}: bad dims {dims_s:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    if dims != tag.dims() {
        return Err(Error::Format(format!(
            "{}: dims {dims:?} do not match {} layout {:?}",
            path.display(),
            tag.name(),
            tag.dims()
        )));
    }
    let per_record: usize = dims.iter().product();
    let payload = &rest[header_end + 1..];
    if payload.len() != n * per_record * 4 {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, expected {}",
            path.display(),
            payload.len(),
            n * per_record * 4
        )));
    }
    let mut features = Vec::with_capacity(n);
    for r in 0..n {
        let mut values = Vec::with_capacity(per_record);
        for i in 0..per_record {
            let off = (r * per_record + i) * 4;
            values.push(f32::from_le_bytes([
                payload[off],
                payload[off + 1],
                payload[off + 2],
                payload[off + 3],
            ]));
        }
        let feature = match tag {
            FeatureTag::AvgPool => VisualFeature::AvgPool(values),
            FeatureTag::Conv => VisualFeature::Conv(values),
            FeatureTag::ActionScores => VisualFeature::ActionScores(values),
        };
        feature.validate()?;
        features.push(feature);
    }
    Ok(features)
}

/// [`load_features`] plus the corpus-alignment check.
pub fn load_features_aligned(
    path: &Path,
    tag: FeatureTag,
    corpus_lines: usize,
) -> Result<Vec<VisualFeature>> {
    let features = load_features(path, tag)?;
    if features.len() != corpus_lines {
        return Err(Error::Alignment(format!(
            "{}: {} features for {} corpus lines",
            path.display(),
            features.len(),
            corpus_lines
        )));
    }
    Ok(features)
}
