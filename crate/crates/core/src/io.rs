//! On-disk formats: weights (`TEALW1`), models (`TEALM1`), greedy traces
//! (`TEALG1`) and block sparsity configs (`TEALC1`). Histograms
//! (`TEALH1`) live with [`ActivationHistogram`](crate::ActivationHistogram).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Result, TealError};
use crate::greedy::{GreedyStep, GreedyTrace};
use crate::model::{BlockDims, BlockSparsityConfig, MatrixKind, Model, TransformerBlock};
use crate::scalar::Scalar;
use crate::sparsify::Threshold;
use crate::tensor::{Layout, Matrix, Vector};

fn read_header_line<R: BufRead>(r: &mut R, kind: &'static str) -> Result<String> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 || buf.last() != Some(&b'\n') {
        return Err(TealError::format(kind, "missing or unterminated header line"));
    }
    buf.pop();
    String::from_utf8(buf).map_err(|_| TealError::format(kind, "header is not UTF-8"))
}

fn parse_field<F: std::str::FromStr>(kind: &'static str, what: &str, s: Option<&str>) -> Result<F> {
    let s = s.ok_or_else(|| TealError::format(kind, format!("missing {what}")))?;
    s.parse()
        .map_err(|_| TealError::format(kind, format!("bad {what}: {s:?}")))
}

/// Header `TEALW1 <rows> <cols> <layout>`, then `rows·cols` little-endian
/// f32 in logical row-major order. f64 matrices are narrowed to f32.
pub fn write_matrix<T: Scalar, W: Write>(w: &mut W, m: &Matrix<T>) -> Result<()> {
    writeln!(w, "TEALW1 {} {} {}", m.rows(), m.cols(), m.layout())?;
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = m.get(i, j).to_f32().unwrap_or(f32::NAN);
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_matrix<T: Scalar, R: BufRead>(r: &mut R) -> Result<Matrix<T>> {
    const KIND: &str = "TEALW1";
    let header = read_header_line(r, KIND)?;
    let mut f = header.split(' ');
    if f.next() != Some(KIND) {
        return Err(TealError::format(KIND, format!("bad magic in {header:?}")));
    }
    let rows: usize = parse_field(KIND, "rows", f.next())?;
    let cols: usize = parse_field(KIND, "cols", f.next())?;
    let layout_s: String = parse_field(KIND, "layout", f.next())?;
    let layout = Layout::parse(&layout_s).ok_or_else(|| TealError::format(KIND, format!("bad layout {layout_s:?}")))?;
    if f.next().is_some() {
        return Err(TealError::format(KIND, "trailing header fields"));
    }
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| TealError::format(KIND, "size overflow"))?;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TealError::format(KIND, "truncated payload"),
        _ => e.into(),
    })?;
    let logical: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let row_major = Matrix::new(rows, cols, Layout::RowMajor, logical)?;
    Ok(row_major.to_layout(layout))
}

pub fn save_matrix<T: Scalar>(path: &Path, m: &Matrix<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, m)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_matrix<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let m = read_matrix(&mut r)?;
    ensure_eof(&mut r, "TEALW1")?;
    Ok(m)
}

fn ensure_eof<R: Read>(r: &mut R, kind: &'static str) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(TealError::format(kind, "trailing data after last section"));
    }
    Ok(())
}

fn vector_section<T: Scalar>(v: &Vector<T>) -> Matrix<T> {
    Matrix::new(1, v.len(), Layout::RowMajor, v.to_vec()).expect("1xd")
}

/// `TEALM1 <blocks> <d_model> <heads> <d_ff>`, then for each block the seven
/// weights in order q,k,v,o,gate,up,down followed by the two norm scales
/// (attention, MLP) as `1×d_model` weight sections.
pub fn write_model<T: Scalar, W: Write>(w: &mut W, model: &Model<T>) -> Result<()> {
    let d = model.dims();
    writeln!(
        w,
        "TEALM1 {} {} {} {}",
        model.blocks().len(),
        d.d_model,
        d.heads,
        d.d_ff
    )?;
    for b in model.blocks() {
        for kind in MatrixKind::ALL {
            write_matrix(w, b.matrix(kind))?;
        }
        write_matrix(w, &vector_section(b.rms_attn()))?;
        write_matrix(w, &vector_section(b.rms_mlp()))?;
    }
    Ok(())
}

pub fn read_model<T: Scalar, R: BufRead>(r: &mut R) -> Result<Model<T>> {
    const KIND: &str = "TEALM1";
    let header = read_header_line(r, KIND)?;
    let mut f = header.split(' ');
    if f.next() != Some(KIND) {
        return Err(TealError::format(KIND, format!("bad magic in {header:?}")));
    }
    let n_blocks: usize = parse_field(KIND, "block count", f.next())?;
    let dims = BlockDims {
        d_model: parse_field(KIND, "d_model", f.next())?,
        heads: parse_field(KIND, "heads", f.next())?,
        d_ff: parse_field(KIND, "d_ff", f.next())?,
    };
    if f.next().is_some() {
        return Err(TealError::format(KIND, "trailing header fields"));
    }
    dims.validate()?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mut ws = Vec::with_capacity(7);
        for _ in MatrixKind::ALL {
            ws.push(read_matrix::<T, _>(r)?);
        }
        let weights: [Matrix<T>; 7] = ws.try_into().expect("seven sections");
        let mut norm = || -> Result<Vector<T>> {
            let m = read_matrix::<T, _>(r)?;
            if m.rows() != 1 {
                return Err(TealError::format(KIND, "norm scale section must have one row"));
            }
            Ok(Vector::new(m.into_inner()))
        };
        let rms_attn = norm()?;
        let rms_mlp = norm()?;
        blocks.push(TransformerBlock::new(dims, weights, rms_attn, rms_mlp)?);
    }
    ensure_eof(r, KIND)?;
    Model::new(blocks)
}

pub fn save_model<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    read_model(&mut BufReader::new(fs::File::open(path)?))
}

/// `TEALG1 <block_id> <alpha>`, then `P p_q … p_down chosen error` per step.
/// The initial record's chosen layer is written as `-`.
pub fn trace_to_text(trace: &GreedyTrace) -> String {
    let mut s = format!("TEALG1 {} {:?}\n", trace.block_id, trace.alpha);
    for step in &trace.steps {
        s.push_str(&format!("{:?}", step.block_sparsity));
        for p in &step.levels {
            s.push_str(&format!(" {p:?}"));
        }
        s.push_str(&format!(" {} {:?}\n", trace.chosen_name(step), step.error));
    }
    s
}

/// Parse a trace over the seven block matrices. Footprints are not part
/// of the file, so the caller supplies them and the result is validated.
pub fn trace_from_text(text: &str, footprints: &[u64]) -> Result<GreedyTrace> {
    const KIND: &str = "TEALG1";
    let names: Vec<String> = MatrixKind::ALL.iter().map(|k| k.name().to_string()).collect();
    if footprints.len() != names.len() {
        return Err(TealError::InvalidArgument(
            "trace footprints must cover 7 matrices".into(),
        ));
    }
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| TealError::format(KIND, "empty file"))?;
    let mut f = header.split(' ');
    if f.next() != Some(KIND) {
        return Err(TealError::format(KIND, format!("bad magic in {header:?}")));
    }
    let block_id: String = parse_field(KIND, "block id", f.next())?;
    let alpha: f64 = parse_field(KIND, "alpha", f.next())?;
    if f.next().is_some() {
        return Err(TealError::format(KIND, "trailing header fields"));
    }
    let mut steps = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != names.len() + 3 {
            return Err(TealError::format(
                KIND,
                format!("step line has {} fields: {line:?}", f.len()),
            ));
        }
        let block_sparsity = parse_field(KIND, "P", Some(f[0]))?;
        let levels = f[1..=names.len()]
            .iter()
            .map(|s| parse_field(KIND, "level", Some(s)))
            .collect::<Result<Vec<f64>>>()?;
        let chosen_s = f[names.len() + 1];
        let chosen = if chosen_s == "-" {
            None
        } else {
            Some(
                names
                    .iter()
                    .position(|n| n == chosen_s)
                    .ok_or_else(|| TealError::format(KIND, format!("unknown layer {chosen_s:?}")))?,
            )
        };
        let error = parse_field(KIND, "error", Some(f[names.len() + 2]))?;
        steps.push(GreedyStep {
            block_sparsity,
            levels,
            chosen,
            error,
        });
    }
    let trace = GreedyTrace {
        block_id,
        alpha,
        layer_names: names,
        footprints: footprints.to_vec(),
        steps,
    };
    trace.validate()?;
    Ok(trace)
}

/// `TEALC1`, then seven `name level threshold` lines per block, blocks in order.
pub fn configs_to_text<T: Scalar>(cfgs: &[BlockSparsityConfig<T>]) -> String {
    let mut s = String::from("TEALC1\n");
    for c in cfgs {
        for kind in MatrixKind::ALL {
            let t = c.threshold(kind).value().to_f64().unwrap_or(f64::NAN);
            s.push_str(&format!("{} {:?} {:?}\n", kind.name(), c.level(kind), t));
        }
    }
    s
}

pub fn configs_from_text<T: Scalar>(text: &str) -> Result<Vec<BlockSparsityConfig<T>>> {
    const KIND: &str = "TEALC1";
    let mut lines = text.lines();
    if lines.next() != Some(KIND) {
        return Err(TealError::format(KIND, "bad magic"));
    }
    let body: Vec<&str> = lines.collect();
    if body.is_empty() || !body.len().is_multiple_of(7) {
        return Err(TealError::format(
            KIND,
            format!("{} lines is not a whole number of blocks", body.len()),
        ));
    }
    body.chunks(7)
        .map(|chunk| {
            let mut levels = [0.0; 7];
            let mut thresholds = [Threshold::zero(); 7];
            for (kind, line) in MatrixKind::ALL.into_iter().zip(chunk) {
                let f: Vec<&str> = line.split(' ').collect();
                if f.len() != 3 || f[0] != kind.name() {
                    return Err(TealError::format(
                        KIND,
                        format!("expected a {} line, got {line:?}", kind.name()),
                    ));
                }
                levels[kind.index()] = parse_field(KIND, "level", Some(f[1]))?;
                let t: f64 = parse_field(KIND, "threshold", Some(f[2]))?;
                thresholds[kind.index()] =
                    Threshold::from_f64(t).map_err(|_| TealError::format(KIND, format!("invalid threshold {t}")))?;
            }
            BlockSparsityConfig::from_parts(levels, thresholds)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::greedy::{greedy_allocate, SparsityObjective, StepPolicy};
    use crate::rng::RngStream;

    #[test]
    fn weight_round_trip_is_bit_exact() {
        let mut rng = RngStream::new(5);
        for layout in [Layout::RowMajor, Layout::ColMajor] {
            let m = Matrix::<f32>::from_fn(3, 5, layout, |_, _| rng.standard_normal() as f32);
            let mut buf = Vec::new();
            write_matrix(&mut buf, &m).unwrap();
            assert_eq!(buf.len(), "TEALW1 3 5 RowMajor\n".len() + 60);
            let back: Matrix<f32> = read_matrix(&mut buf.as_slice()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn payload_is_logical_row_major() {
        let m = Matrix::<f32>::new(2, 2, Layout::ColMajor, vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        let header = b"TEALW1 2 2 ColMajor\n";
        assert_eq!(&buf[..header.len()], header);
        let vals: Vec<f32> = buf[header.len()..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn corrupt_weights_rejected() {
        let bad: &[&[u8]] = &[
            b"TEALW2 1 1 RowMajor\n\0\0\0\0",
            b"TEALW1 1 1 Diagonal\n\0\0\0\0",
            b"TEALW1 1 2 RowMajor\n\0\0\0\0",
            b"TEALW1 1 x RowMajor\n",
            b"TEALW1 1 1",
        ];
        for b in bad {
            let r: Result<Matrix<f32>> = read_matrix(&mut &b[..]);
            assert!(
                matches!(r, Err(TealError::Format { .. })),
                "{:?}",
                String::from_utf8_lossy(b)
            );
        }
    }

    #[test]
    fn model_round_trip() {
        let m = Model::<f32>::generate(
            2,
            2,
            BlockDims {
                d_model: 8,
                heads: 2,
                d_ff: 12,
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        assert!(buf.starts_with(b"TEALM1 2 8 2 12\n"));
        let back: Model<f32> = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        buf.push(0);
        assert!(read_model::<f32, _>(&mut buf.as_slice()).is_err());
    }

    struct Lin;
    impl SparsityObjective for Lin {
        fn layer_names(&self) -> Vec<String> {
            MatrixKind::ALL.iter().map(|k| k.name().to_string()).collect()
        }
        fn footprints(&self) -> Vec<u64> {
            vec![4, 4, 4, 4, 11, 11, 11]
        }
        fn error(&self, levels: &[f64]) -> Result<f64> {
            Ok(levels.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum())
        }
    }

    #[test]
    fn trace_round_trip() {
        let t = greedy_allocate(&Lin, StepPolicy::new(0.1).unwrap(), "block0").unwrap();
        let text = trace_to_text(&t);
        assert!(text.starts_with("TEALG1 block0 0.1\n0.0 0.0 0.0 0.0 0.0 0.0 0.0 0.0 - 0.0\n"));
        let back = trace_from_text(&text, &Lin.footprints()).unwrap();
        assert_eq!(back, t);
        let broken = text.replacen("\n0.0 0.0", "\n0.5 0.0", 1);
        assert!(trace_from_text(&broken, &Lin.footprints()).is_err());
    }

    #[test]
    fn config_round_trip() {
        let mut levels = [0.0; 7];
        let mut ts = [Threshold::<f32>::zero(); 7];
        for i in 0..7 {
            levels[i] = i as f64 / 7.0;
            ts[i] = Threshold::new(0.1 * i as f32).unwrap();
        }
        ts[6] = Threshold::prune_all();
        let cfgs = vec![
            BlockSparsityConfig::from_parts(levels, ts).unwrap(),
            BlockSparsityConfig::dense(),
        ];
        let text = configs_to_text(&cfgs);
        assert_eq!(text.lines().count(), 15);
        let back: Vec<BlockSparsityConfig<f32>> = configs_from_text(&text).unwrap();
        assert_eq!(back, cfgs);
        let short: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(configs_from_text::<f32>(&short).is_err());
    }
}
