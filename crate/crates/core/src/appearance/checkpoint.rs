//! Text checkpoint for the appearance networks.
//!
//! ```text
//! GSWNET1 K=<k> decoder_input=<view|position>
//! section extractor <tensor count>
//! <name> <rank> <dim>...
//! <values>
//! ...
//! section fusion <tensor count>
//! ...
//! section decoder <tensor count>
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::Parameterized;
use super::{AppearanceModel, DecoderInput};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "GSWNET1";

fn write_section(out: &mut String, name: &str, tensors: Vec<super::nn::TensorRef<'_>>) {
    let _ = writeln!(out, "section {name} {}", tensors.len());
    for t in tensors {
        let _ = write!(out, "{} {}", t.name, t.shape.len());
        for d in &t.shape {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let vals: Vec<String> = t.data.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
}

pub fn checkpoint_to_string(model: &AppearanceModel) -> String {
    let mut out = String::new();
    let decoder = match model.fusion.decoder_input {
        DecoderInput::ViewDirection => "view",
        DecoderInput::Position => "position",
    };
    let _ = writeln!(out, "{CHECKPOINT_MAGIC} K={} decoder_input={decoder}", model.k());
    write_section(&mut out, "extractor", model.extractor.tensors());
    let fusion: Vec<_> = model
        .fusion
        .tensors()
        .into_iter()
        .filter(|t| !t.name.starts_with("decoder."))
        .collect();
    write_section(&mut out, "fusion", fusion);
    let decoder: Vec<_> = model
        .fusion
        .tensors()
        .into_iter()
        .filter(|t| t.name.starts_with("decoder."))
        .collect();
    write_section(&mut out, "decoder", decoder);
    out
}

pub fn save_checkpoint(model: &AppearanceModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<AppearanceModel> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint(&text, path)
}

pub fn parse_checkpoint(text: &str, path: &Path) -> Result<AppearanceModel> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (ln, header) = lines.next().ok_or_else(|| err(1, "empty checkpoint".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&CHECKPOINT_MAGIC) || fields.len() != 3 {
        return Err(err(ln, format!("expected `{CHECKPOINT_MAGIC} K=<k> decoder_input=<..>`")));
    }
    let k: usize = fields[1]
        .strip_prefix("K=")
        .and_then(|v| v.parse().ok())
        .filter(|k| *k >= 1)
        .ok_or_else(|| err(ln, format!("bad K field `{}`", fields[1])))?;
    let decoder_input = match fields[2].strip_prefix("decoder_input=") {
        Some("view") => DecoderInput::ViewDirection,
        Some("position") => DecoderInput::Position,
        _ => return Err(err(ln, format!("bad decoder_input field `{}`", fields[2]))),
    };

    // Shapes come from a freshly built model; values are overwritten.
    let mut model = AppearanceModel::new(k, decoder_input, &mut ChaCha8Rng::seed_from_u64(0));
    let extractor_meta: Vec<(String, Vec<usize>)> = model
        .extractor
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    let fusion_meta: Vec<(String, Vec<usize>)> = model
        .fusion
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    let n_decoder = fusion_meta.iter().filter(|(n, _)| n.starts_with("decoder.")).count();
    let n_fusion = fusion_meta.len() - n_decoder;

    let mut read_section = |name: &str, meta: &[(String, Vec<usize>)]| -> Result<Vec<Vec<f64>>> {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(0, format!("missing section `{name}`")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 || f[0] != "section" || f[1] != name {
            return Err(err(ln, format!("expected `section {name} <count>`")));
        }
        let count: usize = f[2]
            .parse()
            .map_err(|_| err(ln, format!("bad tensor count `{}`", f[2])))?;
        if count != meta.len() {
            return Err(err(ln, format!("section {name} has {count} tensors, expected {}", meta.len())));
        }
        let mut out = Vec::with_capacity(count);
        for (tname, shape) in meta {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| err(0, format!("truncated section `{name}`")))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let dims: Option<Vec<usize>> = f.get(2..).map(|d| d.iter().filter_map(|v| v.parse().ok()).collect());
            if f.first() != Some(&tname.as_str()) || dims.as_ref() != Some(shape) {
                return Err(err(ln, format!("expected tensor `{tname}` with shape {shape:?}")));
            }
            let (ln, line) = lines
                .next()
                .ok_or_else(|| err(0, format!("missing values for `{tname}`")))?;
            let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|e| err(ln, format!("bad float in `{tname}`: {e}")))?;
            let expect: usize = shape.iter().product();
            if vals.len() != expect {
                return Err(err(ln, format!("`{tname}` has {} values, expected {expect}", vals.len())));
            }
            out.push(vals);
        }
        Ok(out)
    };

    let extractor_vals = read_section("extractor", &extractor_meta)?;
    let mut fusion_vals = read_section("fusion", &fusion_meta[..n_fusion])?;
    fusion_vals.extend(read_section("decoder", &fusion_meta[n_fusion..])?);

    for (dst, src) in model.extractor.tensors_mut().into_iter().zip(extractor_vals) {
        dst.copy_from_slice(&src);
    }
    for (dst, src) in model.fusion.tensors_mut().into_iter().zip(fusion_vals) {
        dst.copy_from_slice(&src);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = AppearanceModel::new(2, DecoderInput::Position, &mut ChaCha8Rng::seed_from_u64(5));
        let text = checkpoint_to_string(&model);
        let back = parse_checkpoint(&text, Path::new("mem")).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn truncated_checkpoint_names_line() {
        let model = AppearanceModel::new(1, DecoderInput::ViewDirection, &mut ChaCha8Rng::seed_from_u64(5));
        let text = checkpoint_to_string(&model);
        let cut: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        let e = parse_checkpoint(&cut, Path::new("mem")).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        let bad = text.replacen("GSWNET1", "GSWNET9", 1);
        match parse_checkpoint(&bad, Path::new("mem")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
