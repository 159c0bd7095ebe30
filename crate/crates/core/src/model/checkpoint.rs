//! Version-tagged text checkpoint holding the model config, the student and
//! teacher parameters, the optimizer velocity and the global step.
//!
//! ```text
//! waferssl-checkpoint v1
//! config <input_height> <input_width> <stem_channels> <blocks> <embed_dim> <proj_dim>
//! step <global_step>
//! section student
//! <name> <kind> <d0>x<d1>x... <v0> <v1> ...
//! ...
//! section teacher
//! ...
//! section velocity
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ModelConfig, Param, ParamKind, ParamSet, Velocity};
use crate::error::{Error, Result};

pub const CHECKPOINT_TAG: &str = "waferssl-checkpoint v1";

const SECTIONS: [&str; 3] = ["student", "teacher", "velocity"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub velocity: Velocity,
    pub step: u64,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.student.config()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = self.config();
        writeln!(w, "{CHECKPOINT_TAG}")?;
        writeln!(
            w,
            "config {} {} {} {} {} {}",
            c.input_height, c.input_width, c.stem_channels, c.blocks, c.embed_dim, c.proj_dim
        )?;
        writeln!(w, "step {}", self.step)?;
        for (name, set) in SECTIONS
            .iter()
            .zip([&self.student, &self.teacher, &self.velocity.0])
        {
            writeln!(w, "section {name}")?;
            for p in set.params() {
                let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
                write!(w, "{} {} {}", p.name, p.kind.as_str(), shape.join("x"))?;
                for v in &p.data {
                    write!(w, " {v}")?;
                }
                writeln!(w)?;
            }
        }
        writeln!(w, "end")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((_, Err(e))) => Err(Error::io("<stream>", e)),
                None => Err(bad(0, format!("unexpected end of checkpoint, expected {what}"))),
            }
        };

        let (n, tag) = next("header")?;
        if tag.trim_end() != CHECKPOINT_TAG {
            return Err(bad(n, format!("expected `{CHECKPOINT_TAG}`")));
        }
        let (n, cfg_line) = next("config")?;
        let config = parse_config(n, &cfg_line)?;
        let (n, step_line) = next("step")?;
        let step = step_line
            .strip_prefix("step ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(n, "expected `step <n>`"))?;

        let expected_count = ParamSet::identity_init(&config).params().len();
        let mut sets = Vec::with_capacity(3);
        for section in SECTIONS {
            let (n, header) = next("section")?;
            if header.trim_end() != format!("section {section}") {
                return Err(bad(n, format!("expected `section {section}`")));
            }
            let mut params = Vec::with_capacity(expected_count);
            for _ in 0..expected_count {
                let (n, line) = next("tensor")?;
                params.push(parse_param(n, &line)?);
            }
            sets.push(ParamSet::from_params(config, params)?);
        }
        let (n, end) = next("end")?;
        if end.trim_end() != "end" {
            return Err(bad(n, "expected `end`"));
        }
        let velocity = Velocity(sets.pop().expect("three sections"));
        let teacher = sets.pop().expect("three sections");
        let student = sets.pop().expect("three sections");
        Ok(Checkpoint {
            student,
            teacher,
            velocity,
            step,
        })
    }
}

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        line,
        message: message.into(),
    }
}

fn parse_config(n: usize, line: &str) -> Result<ModelConfig> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 7 || toks[0] != "config" {
        return Err(bad(n, "expected `config` with six dimensions"));
    }
    let v: Vec<usize> = toks[1..]
        .iter()
        .map(|t| t.parse().map_err(|_| bad(n, format!("bad dimension `{t}`"))))
        .collect::<Result<_>>()?;
    let cfg = ModelConfig {
        input_height: v[0],
        input_width: v[1],
        stem_channels: v[2],
        blocks: v[3],
        embed_dim: v[4],
        proj_dim: v[5],
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_param(n: usize, line: &str) -> Result<Param> {
    let mut toks = line.split_whitespace();
    let name = toks.next().ok_or_else(|| bad(n, "empty tensor line"))?.to_string();
    let kind = toks
        .next()
        .and_then(ParamKind::parse)
        .ok_or_else(|| bad(n, "bad tensor kind"))?;
    let shape: Vec<usize> = toks
        .next()
        .ok_or_else(|| bad(n, "missing shape"))?
        .split('x')
        .map(|d| d.parse().map_err(|_| bad(n, format!("bad shape component `{d}`"))))
        .collect::<Result<_>>()?;
    let data: Vec<f64> = toks
        .map(|t| t.parse().map_err(|_| bad(n, format!("bad value `{t}`"))))
        .collect::<Result<_>>()?;
    if data.len() != shape.iter().product::<usize>() {
        return Err(bad(n, format!("`{name}` has {} values for shape {shape:?}", data.len())));
    }
    Ok(Param {
        name,
        kind,
        shape,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            input_height: 8,
            input_width: 10,
            stem_channels: 3,
            blocks: 2,
            embed_dim: 5,
            proj_dim: 2,
        };
        let mut velocity = Velocity::zeros(&cfg);
        velocity.0.params_mut()[0].data[0] = 1.0 / 3.0;
        let ck = Checkpoint {
            student: init_params(&cfg, 1).unwrap(),
            teacher: init_params(&cfg, 2).unwrap(),
            velocity,
            step: 42,
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.student.fingerprint(), ck.student.fingerprint());
    }

    #[test]
    fn rejects_truncation_and_bad_tag() {
        let cfg = ModelConfig {
            input_height: 8,
            input_width: 8,
            stem_channels: 2,
            blocks: 1,
            embed_dim: 3,
            proj_dim: 2,
        };
        let ck = Checkpoint {
            student: init_params(&cfg, 1).unwrap(),
            teacher: init_params(&cfg, 1).unwrap(),
            velocity: Velocity::zeros(&cfg),
            step: 0,
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(Checkpoint::read(truncated.as_bytes()).is_err());
        let retagged = text.replacen("v1", "v2", 1);
        assert!(Checkpoint::read(retagged.as_bytes()).is_err());
    }
}
