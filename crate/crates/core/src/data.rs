//! Dataset ingestion, preprocessing, batching, and synthetic generation.
//!
//! File format (text, UTF-8, one student per 4 non-blank lines):
//!   line 1: `<student_id>,<seq_len>`
//!   line 2: comma-separated question ids
//!   line 3: comma-separated KC ids
//!   line 4: comma-separated responses (0 or 1)
//! Blank lines between records are permitted. A sidecar `<path>.meta` file
//! (flat `key = value` text) carries counts and the dense-id mapping; when
//! present it is the mapping authority, otherwise ids are remapped in order
//! of first occurrence.

use std::borrow::Borrow;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const MIN_LEN: usize = 3;
pub const L_MAX: usize = 200;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub question: usize,
    pub kc: usize,
    pub response: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub student_id: String,
    pub items: Vec<Interaction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    /// KC count n; every kc id in the data is < n.
    pub n_kcs: usize,
    /// Question count Q.
    pub n_questions: usize,
    pub l_max: usize,
    pub fractions: [f64; 3],
    /// dense kc id -> original id
    pub kc_ids: Vec<u64>,
    /// dense question id -> original id
    pub question_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<InteractionSequence>,
    pub valid: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
}

/// Padded mini-batch. Ids are i64 with -1 at padding; within a row the
/// valid positions form a prefix.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: usize,
    pub cols: usize,
    pub questions: Vec<i64>,
    pub kcs: Vec<i64>,
    pub responses: Vec<i64>,
    pub valid: Vec<bool>,
    pub student_ids: Vec<String>,
}

impl Batch {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }
}

// ---- loading and saving ----

pub fn load_sequences(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let meta_path = sidecar_path(path);
    let sidecar = if meta_path.exists() {
        Some(parse_meta(&std::fs::read_to_string(&meta_path)?)?)
    } else {
        None
    };
    parse_dataset(&text, sidecar)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

fn parse_dataset(text: &str, sidecar: Option<DatasetMeta>) -> Result<Dataset> {
    // (line number, content) for non-blank lines
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if lines.len() % 4 != 0 {
        let last = lines.last().map_or(0, |(n, _)| *n);
        return Err(Error::Parse {
            line: last,
            msg: "truncated record: records are 4 lines each".into(),
        });
    }

    struct RawSeq {
        student_id: String,
        items: Vec<(u64, u64, u8)>,
    }

    let mut raw = Vec::new();
    for rec in lines.chunks(4) {
        let (hline, header) = rec[0];
        let (sid, len) = header.split_once(',').ok_or(Error::Parse {
            line: hline,
            msg: "expected `<student_id>,<seq_len>`".into(),
        })?;
        let len: usize = len.trim().parse().map_err(|_| Error::Parse {
            line: hline,
            msg: format!("bad sequence length {:?}", len.trim()),
        })?;
        let qs = parse_id_line(rec[1], len)?;
        let cs = parse_id_line(rec[2], len)?;
        let rs = parse_id_line(rec[3], len)?;
        let mut items = Vec::with_capacity(len);
        for i in 0..len {
            if rs[i] > 1 {
                return Err(Error::Data(format!(
                    "line {}: response {} outside {{0,1}}",
                    rec[3].0, rs[i]
                )));
            }
            items.push((qs[i], cs[i], rs[i] as u8));
        }
        raw.push(RawSeq { student_id: sid.trim().to_string(), items });
    }

    // id remapping: sidecar is authoritative when present
    let (q_map, kc_map, mut meta) = match sidecar {
        Some(m) => {
            let q_map: HashMap<u64, usize> =
                m.question_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            let kc_map: HashMap<u64, usize> =
                m.kc_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            (Some(q_map), Some(kc_map), m)
        }
        None => (
            None,
            None,
            DatasetMeta {
                n_kcs: 0,
                n_questions: 0,
                l_max: L_MAX,
                fractions: DEFAULT_FRACTIONS,
                kc_ids: Vec::new(),
                question_ids: Vec::new(),
            },
        ),
    };
    let mut q_first: HashMap<u64, usize> = HashMap::new();
    let mut kc_first: HashMap<u64, usize> = HashMap::new();

    let mut sequences = Vec::new();
    for rs in raw {
        // sequences with fewer than 3 attempts carry no signal: dropped pre-split
        if rs.items.len() < MIN_LEN {
            continue;
        }
        let mut items = Vec::with_capacity(rs.items.len());
        for (q, c, r) in rs.items {
            let qd = match &q_map {
                Some(m) => *m.get(&q).ok_or_else(|| {
                    Error::Data(format!("question id {q} not in sidecar map"))
                })?,
                None => *q_first.entry(q).or_insert_with(|| {
                    meta.question_ids.push(q);
                    meta.question_ids.len() - 1
                }),
            };
            let cd = match &kc_map {
                Some(m) => *m
                    .get(&c)
                    .ok_or_else(|| Error::Data(format!("kc id {c} not in sidecar map")))?,
                None => *kc_first.entry(c).or_insert_with(|| {
                    meta.kc_ids.push(c);
                    meta.kc_ids.len() - 1
                }),
            };
            items.push(Interaction { question: qd, kc: cd, response: r });
        }
        // split over-long sequences into chunks; trailing chunks under the
        // length filter are dropped
        for chunk in items.chunks(meta.l_max.max(1)) {
            if chunk.len() >= MIN_LEN {
                sequences.push(InteractionSequence {
                    student_id: rs.student_id.clone(),
                    items: chunk.to_vec(),
                });
            }
        }
    }

    if q_map.is_none() {
        meta.n_questions = meta.question_ids.len();
        meta.n_kcs = meta.kc_ids.len();
    }
    // declared counts must cover the data
    for s in &sequences {
        for it in &s.items {
            if it.question >= meta.n_questions || it.kc >= meta.n_kcs {
                return Err(Error::Data(format!(
                    "id out of declared range: question {} (Q={}), kc {} (n={})",
                    it.question, meta.n_questions, it.kc, meta.n_kcs
                )));
            }
        }
    }
    Ok(Dataset { sequences, meta })
}

fn parse_id_line(rec: (usize, &str), expect: usize) -> Result<Vec<u64>> {
    let (line, text) = rec;
    let vals: Vec<u64> = text
        .split(',')
        .map(|t| t.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse { line, msg: format!("bad integer: {e}") })?;
    if vals.len() != expect {
        return Err(Error::Parse {
            line,
            msg: format!("expected {expect} values, got {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Write the dataset (original ids, via the meta maps) plus its sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &ds.sequences {
        writeln!(out, "{},{}", s.student_id, s.items.len()).unwrap();
        let qs: Vec<String> = s
            .items
            .iter()
            .map(|it| ds.meta.question_ids[it.question].to_string())
            .collect();
        let cs: Vec<String> =
            s.items.iter().map(|it| ds.meta.kc_ids[it.kc].to_string()).collect();
        let rs: Vec<String> = s.items.iter().map(|it| it.response.to_string()).collect();
        writeln!(out, "{}", qs.join(",")).unwrap();
        writeln!(out, "{}", cs.join(",")).unwrap();
        writeln!(out, "{}", rs.join(",")).unwrap();
        out.push('\n');
    }
    std::fs::write(path, out)?;
    std::fs::write(sidecar_path(path), meta_to_text(&ds.meta))?;
    Ok(())
}

pub fn meta_to_text(m: &DatasetMeta) -> String {
    let join = |v: &[u64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    format!(
        "n = {}\nQ = {}\nl_max = {}\nfractions = {},{},{}\nkc_ids = {}\nquestion_ids = {}\n",
        m.n_kcs,
        m.n_questions,
        m.l_max,
        m.fractions[0],
        m.fractions[1],
        m.fractions[2],
        join(&m.kc_ids),
        join(&m.question_ids),
    )
}

pub fn parse_meta(text: &str) -> Result<DatasetMeta> {
    let mut kv = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(Error::Parse {
            line: i + 1,
            msg: "expected `key = value`".into(),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Data(format!("meta missing `{k}`")));
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Data(format!("meta `{k}` not an integer")))
    };
    let parse_ids = |k: &str| -> Result<Vec<u64>> {
        let raw = get(k)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Data(format!("bad id in `{k}`"))))
            .collect()
    };
    let fractions = match kv.get("fractions") {
        Some(raw) => {
            let parts: Vec<f64> = raw
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| Error::Data("bad fraction".into())))
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                return Err(Error::Data("fractions must have 3 entries".into()));
            }
            [parts[0], parts[1], parts[2]]
        }
        None => DEFAULT_FRACTIONS,
    };
    let meta = DatasetMeta {
        n_kcs: parse_usize("n")?,
        n_questions: parse_usize("Q")?,
        l_max: kv.get("l_max").map_or(Ok(L_MAX), |v| {
            v.parse().map_err(|_| Error::Data("meta `l_max` not an integer".into()))
        })?,
        fractions,
        kc_ids: parse_ids("kc_ids")?,
        question_ids: parse_ids("question_ids")?,
    };
    if meta.kc_ids.len() != meta.n_kcs || meta.question_ids.len() != meta.n_questions {
        return Err(Error::Data("meta id map lengths disagree with counts".into()));
    }
    Ok(meta)
}

// ---- splitting ----

/// Deterministic split by student (all chunks of one student stay in the
/// same part, so chunked long sequences cannot leak across parts).
pub fn split(ds: &Dataset, seed: u64, fractions: [f64; 3]) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let mut students = Vec::new();
    let mut by_student: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in ds.sequences.iter().enumerate() {
        by_student
            .entry(s.student_id.as_str())
            .or_insert_with(|| {
                students.push(s.student_id.as_str());
                Vec::new()
            })
            .push(i);
    }
    let n_parts = fractions.iter().filter(|&&f| f > 0.0).count();
    if students.len() < n_parts {
        return Err(Error::Usage(format!(
            "{} students cannot fill {} split parts",
            students.len(),
            n_parts
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    students.shuffle(&mut rng);

    let n = students.len() as f64;
    let b1 = (fractions[0] * n).round() as usize;
    let b2 = ((fractions[0] + fractions[1]) * n).round() as usize;
    let pick = |range: &[&str]| -> Vec<InteractionSequence> {
        let mut out = Vec::new();
        for sid in range {
            for &i in &by_student[sid] {
                out.push(ds.sequences[i].clone());
            }
        }
        out
    };
    Ok(Split {
        train: pick(&students[..b1.min(students.len())]),
        valid: pick(&students[b1.min(students.len())..b2.min(students.len())]),
        test: pick(&students[b2.min(students.len())..]),
    })
}

// ---- batching ----

pub fn make_batches<S: Borrow<InteractionSequence>>(
    sequences: &[S],
    batch_size: usize,
    l_max: usize,
) -> Vec<Batch> {
    assert!(batch_size >= 1);
    let mut out = Vec::new();
    for group in sequences.chunks(batch_size) {
        let width = group
            .iter()
            .map(|s| s.borrow().items.len().min(l_max))
            .max()
            .unwrap_or(0);
        let rows = group.len();
        let mut b = Batch {
            rows,
            cols: width,
            questions: vec![-1; rows * width],
            kcs: vec![-1; rows * width],
            responses: vec![-1; rows * width],
            valid: vec![false; rows * width],
            student_ids: group.iter().map(|s| s.borrow().student_id.clone()).collect(),
        };
        for (r, s) in group.iter().enumerate() {
            for (c, it) in s.borrow().items.iter().take(l_max).enumerate() {
                let i = b.at(r, c);
                b.questions[i] = it.question as i64;
                b.kcs[i] = it.kc as i64;
                b.responses[i] = it.response as i64;
                b.valid[i] = true;
            }
        }
        out.push(b);
    }
    out
}

// ---- synthetic generation ----

/// Rasch-style generator: per-KC ability a ~ N(0,1) (with a shared
/// per-student factor; the marginal stays standard normal), question
/// difficulty b ~ N(0,1), response ~ Bernoulli(sigmoid(a - b)), and a +0.1
/// ability increment after every interaction with that KC so history is
/// predictive. Practice comes in short same-KC blocks, which gives each KC
/// enough depth for attention over history to pay off.
pub fn gen_synthetic(
    num_students: usize,
    n_kcs: usize,
    num_questions: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_students == 0 || n_kcs == 0 || num_questions == 0 {
        return Err(Error::Usage("synthetic generator counts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let difficulty: Vec<f64> = (0..num_questions).map(|_| normal(&mut rng)).collect();
    // round-robin KC assignment so every KC has questions when Q >= n
    let q_kc: Vec<usize> = (0..num_questions).map(|q| q % n_kcs).collect();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_kcs];
    for (q, &c) in q_kc.iter().enumerate() {
        pools[c].push(q);
    }
    let active_kcs = n_kcs.min(num_questions);

    let (len_lo, len_hi) = (20usize, 60usize);
    let (run_lo, run_hi) = (3usize, 8usize);
    // shared-factor weight: ability = sqrt(w)*g + sqrt(1-w)*e keeps N(0,1)
    // marginals while making performance on one KC informative about others
    let w = 0.5f64;
    let (wg, we) = (w.sqrt(), (1.0 - w).sqrt());

    let mut sequences = Vec::with_capacity(num_students);
    for s in 0..num_students {
        let g = normal(&mut rng);
        let mut ability: Vec<f64> =
            (0..n_kcs).map(|_| wg * g + we * normal(&mut rng)).collect();
        let len = rng.gen_range(len_lo..=len_hi);
        let mut items = Vec::with_capacity(len);
        while items.len() < len {
            let c = rng.gen_range(0..active_kcs);
            let run = rng.gen_range(run_lo..=run_hi);
            for _ in 0..run {
                if items.len() >= len {
                    break;
                }
                let q = pools[c][rng.gen_range(0..pools[c].len())];
                let p = crate::matrix::sigmoid(ability[c] - difficulty[q]);
                let r = rng.gen_bool(p) as u8;
                items.push(Interaction { question: q, kc: c, response: r });
                ability[c] += 0.1;
            }
        }
        sequences.push(InteractionSequence { student_id: format!("s{s}"), items });
    }

    Ok(Dataset {
        sequences,
        meta: DatasetMeta {
            n_kcs,
            n_questions: num_questions,
            l_max: L_MAX,
            fractions: DEFAULT_FRACTIONS,
            kc_ids: (0..n_kcs as u64).collect(),
            question_ids: (0..num_questions as u64).collect(),
        },
    })
}
