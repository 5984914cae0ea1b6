//! Plain-text model files.
//!
//! ```text
//! perminv-model 1
//! kind rnn
//! activation relu
//! encoding scalar 1
//! link identity
//! head
//! tensor cell.w_out 2 1 3
//! 1 -1 -1
//! ...
//! ```
//!
//! Header lines come first, then one `tensor <name> <rank> <dims..>` line per
//! parameter followed by a line with its flat values, in declared field
//! order. Values use Rust's shortest round-trip float formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{
    Activation, DeepSets, DeepSetsParams, Dense, Gru, GruParams, InputEncoding, Link, Mlp,
    Parameterized, Recurrent, Rnn, RnnParams, SequenceModel,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "perminv-model 1";

/// Any serializable architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Rnn(Rnn),
    Gru(Gru),
    DeepSets(DeepSets),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Rnn(_) => "rnn",
            Model::Gru(_) => "gru",
            Model::DeepSets(_) => "deepsets",
        }
    }

    pub fn as_recurrent(&self) -> Option<&dyn Recurrent> {
        match self {
            Model::Rnn(m) => Some(m),
            Model::Gru(m) => Some(m),
            Model::DeepSets(_) => None,
        }
    }

    fn as_sequence(&self) -> &dyn SequenceModel {
        match self {
            Model::Rnn(m) => m,
            Model::Gru(m) => m,
            Model::DeepSets(m) => m,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut records: Vec<(String, &Tensor)> = Vec::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "kind {}", self.kind()).unwrap();
        match self {
            Model::Rnn(m) => {
                writeln!(out, "activation {}", m.cell.activation.name()).unwrap();
                write_common(&mut out, &m.encoding, m.link);
                writeln!(out, "head{}", activations(&m.head)).unwrap();
                let names = ["w_out", "w_x", "w_s", "b", "s0"];
                for (n, t) in names.iter().zip(m.cell.params()) {
                    records.push((format!("cell.{n}"), t));
                }
                push_mlp(&mut records, "head", &m.head);
            }
            Model::Gru(m) => {
                write_common(&mut out, &m.encoding, m.link);
                writeln!(out, "head{}", activations(&m.head)).unwrap();
                let names = [
                    "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n", "s0",
                ];
                for (n, t) in names.iter().zip(m.cell.params()) {
                    records.push((format!("cell.{n}"), t));
                }
                push_mlp(&mut records, "head", &m.head);
            }
            Model::DeepSets(m) => {
                write_common(&mut out, &m.encoding, m.link);
                writeln!(out, "phi{}", activations(&m.params.phi)).unwrap();
                writeln!(out, "rho{}", activations(&m.params.rho)).unwrap();
                push_mlp(&mut records, "phi", &m.params.phi);
                push_mlp(&mut records, "rho", &m.params.rho);
            }
        }
        for (name, t) in records {
            write!(out, "tensor {name} {}", t.shape().len()).unwrap();
            for d in t.shape() {
                write!(out, " {d}").unwrap();
            }
            out.push('\n');
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", vals.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(Error::parse(1, format!("expected `{MAGIC}`"))),
        }
        let mut header: Vec<(usize, String, Vec<String>)> = Vec::new();
        while let Some((i, l)) = lines.peek() {
            if l.starts_with("tensor ") {
                break;
            }
            let mut words = l.split_whitespace().map(str::to_owned);
            if let Some(key) = words.next() {
                header.push((i + 1, key, words.collect()));
            }
            lines.next();
        }
        let mut records = Vec::new();
        while let Some((i, l)) = lines.next() {
            if l.trim().is_empty() {
                continue;
            }
            let words: Vec<&str> = l.split_whitespace().collect();
            if words.len() < 3 || words[0] != "tensor" {
                return Err(Error::parse(i + 1, "expected a tensor record"));
            }
            let rank: usize = parse_num(i, words[2])?;
            if words.len() != 3 + rank {
                return Err(Error::parse(i + 1, "rank does not match dimension count"));
            }
            let shape = words[3..]
                .iter()
                .map(|w| parse_num(i, w))
                .collect::<Result<Vec<usize>>>()?;
            let (j, vals) = lines
                .next()
                .ok_or_else(|| Error::parse(i + 2, "missing tensor values"))?;
            let data = vals
                .split_whitespace()
                .map(|w| parse_num(j, w))
                .collect::<Result<Vec<f64>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::parse(j + 1, e.to_string()))?;
            records.push((words[1].to_owned(), t.requiring_grad()));
        }

        let get = |key: &str| -> Result<&Vec<String>> {
            header
                .iter()
                .find(|(_, k, _)| k == key)
                .map(|(_, _, v)| v)
                .ok_or_else(|| Error::parse(0, format!("missing header `{key}`")))
        };
        let kind = get("kind")?.first().cloned().unwrap_or_default();
        let encoding = parse_encoding(get("encoding")?)?;
        let link = Link::parse(get("link")?.first().map(String::as_str).unwrap_or(""))?;
        let mut records = Records {
            items: records,
            pos: 0,
        };

        match kind.as_str() {
            "rnn" => {
                let act = Activation::parse(
                    get("activation")?.first().map(String::as_str).unwrap_or(""),
                )?;
                let cell = RnnParams::new(
                    records.take("cell.w_out")?,
                    records.take("cell.w_x")?,
                    records.take("cell.w_s")?,
                    records.take("cell.b")?,
                    records.take("cell.s0")?,
                    act,
                )?;
                let head = records.take_mlp("head", get("head")?)?;
                records.finish()?;
                Ok(Model::Rnn(Rnn::new(cell, head, encoding, link)?))
            }
            "gru" => {
                let cell = GruParams {
                    w_z: records.take("cell.w_z")?,
                    u_z: records.take("cell.u_z")?,
                    b_z: records.take("cell.b_z")?,
                    w_r: records.take("cell.w_r")?,
                    u_r: records.take("cell.u_r")?,
                    b_r: records.take("cell.b_r")?,
                    w_n: records.take("cell.w_n")?,
                    u_n: records.take("cell.u_n")?,
                    b_n: records.take("cell.b_n")?,
                    s0: records.take("cell.s0")?,
                };
                let head = records.take_mlp("head", get("head")?)?;
                records.finish()?;
                Ok(Model::Gru(Gru::new(cell, head, encoding, link)?))
            }
            "deepsets" => {
                let phi = records.take_mlp("phi", get("phi")?)?;
                let rho = records.take_mlp("rho", get("rho")?)?;
                records.finish()?;
                let params = DeepSetsParams::new(phi, rho)?;
                Ok(Model::DeepSets(DeepSets::new(params, encoding, link)?))
            }
            other => Err(Error::parse(2, format!("unknown model kind `{other}`"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_text(&text)
    }
}

fn write_common(out: &mut String, enc: &InputEncoding, link: Link) {
    match enc {
        InputEncoding::Scalar { divisor } => writeln!(out, "encoding scalar {divisor:?}").unwrap(),
        InputEncoding::OneHot { size } => writeln!(out, "encoding onehot {size}").unwrap(),
    }
    writeln!(out, "link {}", link.name()).unwrap();
}

fn activations(m: &Mlp) -> String {
    m.layers
        .iter()
        .map(|l| format!(" {}", l.activation.name()))
        .collect()
}

fn push_mlp<'a>(records: &mut Vec<(String, &'a Tensor)>, prefix: &str, m: &'a Mlp) {
    for (i, l) in m.layers.iter().enumerate() {
        records.push((format!("{prefix}.{i}.w"), &l.w));
        records.push((format!("{prefix}.{i}.b"), &l.b));
    }
}

fn parse_encoding(words: &[String]) -> Result<InputEncoding> {
    match words {
        [k, v] if k == "scalar" => Ok(InputEncoding::Scalar {
            divisor: parse_num(0, v)?,
        }),
        [k, v] if k == "onehot" => Ok(InputEncoding::OneHot {
            size: parse_num(0, v)?,
        }),
        _ => Err(Error::parse(0, "malformed encoding header")),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, w: &str) -> Result<T> {
    w.parse()
        .map_err(|_| Error::parse(line + 1, format!("bad number `{w}`")))
}

struct Records {
    items: Vec<(String, Tensor)>,
    pos: usize,
}

impl Records {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        match self.items.get_mut(self.pos) {
            Some((n, t)) if n == name => {
                self.pos += 1;
                Ok(std::mem::replace(t, Tensor::scalar(0.0)))
            }
            Some((n, _)) => Err(Error::parse(
                0,
                format!("expected tensor `{name}`, found `{n}`"),
            )),
            None => Err(Error::parse(0, format!("missing tensor `{name}`"))),
        }
    }

    fn take_mlp(&mut self, prefix: &str, acts: &[String]) -> Result<Mlp> {
        let mut layers = Vec::with_capacity(acts.len());
        for (i, a) in acts.iter().enumerate() {
            let w = self.take(&format!("{prefix}.{i}.w"))?;
            let b = self.take(&format!("{prefix}.{i}.b"))?;
            layers.push(Dense::new(w, b, Activation::parse(a)?)?);
        }
        Mlp::new(layers)
    }

    fn finish(&self) -> Result<()> {
        match self.items.get(self.pos) {
            None => Ok(()),
            Some((n, _)) => Err(Error::parse(0, format!("unexpected tensor `{n}`"))),
        }
    }
}

impl Parameterized for Model {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Rnn(m) => m.params(),
            Model::Gru(m) => m.params(),
            Model::DeepSets(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Rnn(m) => m.params_mut(),
            Model::Gru(m) => m.params_mut(),
            Model::DeepSets(m) => m.params_mut(),
        }
    }
}

impl SequenceModel for Model {
    fn summarize<'t>(&self, tape: &'t Tape, p: &[Var<'t>], xs: &[i64]) -> Result<Var<'t>> {
        self.as_sequence().summarize(tape, p, xs)
    }

    fn readout<'t>(&self, p: &[Var<'t>], summary: Var<'t>) -> Result<Var<'t>> {
        self.as_sequence().readout(p, summary)
    }

    fn link(&self) -> Link {
        self.as_sequence().link()
    }
}
