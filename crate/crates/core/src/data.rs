//! Knowledge records, newline-delimited JSON ingestion, the synthetic fact
//! corpus and word-level tokenization.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::TokenSeq;

/// One supervised instruction-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
}

impl KnowledgeRecord {
    pub fn new(instruction: impl Into<String>, output: impl Into<String>) -> Self {
        KnowledgeRecord {
            instruction: instruction.into(),
            input: String::new(),
            output: output.into(),
        }
    }

    /// Instruction and input joined the way they are tokenized.
    pub fn prompt(&self) -> String {
        if self.input.is_empty() {
            self.instruction.clone()
        } else {
            format!("{} {}", self.instruction, self.input)
        }
    }
}

/// An edit request with its rephrased and out-of-scope probes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub prompt: String,
    pub target: String,
    pub rephrase: String,
    pub locality_prompt: String,
    /// The pre-update model's answer to `locality_prompt`, once evaluated.
    pub locality_answer_pre: Option<String>,
    /// Unconsumed zsRE fields, carried through unchanged.
    pub metadata: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgePair {
    pub old: KnowledgeRecord,
    pub new: KnowledgeRecord,
    pub eval: EvalRecord,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub pairs: Vec<KnowledgePair>,
    /// Facts that are never edited.
    pub background: Vec<KnowledgeRecord>,
    /// Arithmetic pattern completions probing general capability.
    pub control: Vec<KnowledgeRecord>,
}

impl Corpus {
    pub fn old_records(&self) -> Vec<KnowledgeRecord> {
        self.pairs.iter().map(|p| p.old.clone()).collect()
    }

    pub fn new_records(&self) -> Vec<KnowledgeRecord> {
        self.pairs.iter().map(|p| p.new.clone()).collect()
    }

    pub fn eval_records(&self) -> Vec<EvalRecord> {
        self.pairs.iter().map(|p| p.eval.clone()).collect()
    }

    /// Eval records whose target is the old answer (for forgetting probes).
    pub fn old_eval_records(&self) -> Vec<EvalRecord> {
        self.pairs
            .iter()
            .map(|p| EvalRecord {
                target: p.old.output.clone(),
                ..p.eval.clone()
            })
            .collect()
    }

    /// The first `n` pairs with the same background and control sets.
    pub fn truncated(&self, n: usize) -> Corpus {
        Corpus {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
            background: self.background.clone(),
            control: self.control.clone(),
        }
    }

    /// Every text in the corpus, in a fixed order.
    fn texts(&self) -> impl Iterator<Item = &str> {
        let records = self
            .pairs
            .iter()
            .flat_map(|p| [&p.old, &p.new])
            .chain(&self.background)
            .chain(&self.control);
        let rec_texts = records.flat_map(|r| [r.instruction.as_str(), r.input.as_str(), r.output.as_str()]);
        let eval_texts = self.pairs.iter().flat_map(|p| {
            [
                p.eval.prompt.as_str(),
                p.eval.target.as_str(),
                p.eval.rephrase.as_str(),
                p.eval.locality_prompt.as_str(),
            ]
        });
        rec_texts.chain(eval_texts)
    }

    /// Checks pair consistency and that edited, background and control
    /// prompts never collide.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<String, &'static str> = HashMap::new();
        let mut claim = |prompt: String, set: &'static str| -> Result<()> {
            match seen.get(&prompt) {
                Some(&other) if other != set => Err(Error::input(format!(
                    "prompt `{prompt}` appears in both {other} and {set}"
                ))),
                _ => {
                    seen.insert(prompt, set);
                    Ok(())
                }
            }
        };
        for p in &self.pairs {
            if p.old.instruction != p.new.instruction {
                return Err(Error::input(format!(
                    "pair instructions differ: `{}` vs `{}`",
                    p.old.instruction, p.new.instruction
                )));
            }
            if p.old.output == p.new.output {
                return Err(Error::input(format!(
                    "pair `{}` has identical old and new outputs",
                    p.old.instruction
                )));
            }
            claim(normalize(&p.old.prompt()), "pairs")?;
        }
        for r in &self.background {
            claim(normalize(&r.prompt()), "background")?;
        }
        for r in &self.control {
            claim(normalize(&r.prompt()), "control")?;
        }
        Ok(())
    }
}

fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

// ---------------------------------------------------------------------------
// newline-delimited JSON

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Instruction,
    Zsre,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Instruction(Vec<KnowledgeRecord>),
    Zsre(Vec<EvalRecord>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Instruction(r) => r.len(),
            Records::Zsre(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn parse_records(reader: impl BufRead, format: RecordFormat) -> Result<Records> {
    Ok(match format {
        RecordFormat::Instruction => Records::Instruction(parse_instruction(reader)?),
        RecordFormat::Zsre => Records::Zsre(parse_zsre(reader)?),
    })
}

fn json_lines(reader: impl BufRead) -> Result<Vec<(usize, Map<String, Value>)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(map)) => out.push((line_no, map)),
            Ok(_) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "record is not a JSON object".into(),
                })
            }
            Err(e) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("malformed record: {e}"),
                })
            }
        }
    }
    Ok(out)
}

fn text_field(map: &Map<String, Value>, line: usize, field: &str, required: bool) -> Result<String> {
    match map.get(field) {
        Some(Value::String(s)) if !required || !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(Error::Parse {
            line,
            message: format!("field \"{field}\" is empty"),
        }),
        Some(_) => Err(Error::Parse {
            line,
            message: format!("field \"{field}\" is not a string"),
        }),
        None if required => Err(Error::Parse {
            line,
            message: format!("missing field \"{field}\""),
        }),
        None => Ok(String::new()),
    }
}

pub fn parse_instruction(reader: impl BufRead) -> Result<Vec<KnowledgeRecord>> {
    json_lines(reader)?
        .into_iter()
        .map(|(line, map)| {
            Ok(KnowledgeRecord {
                instruction: text_field(&map, line, "instruction", true)?,
                input: text_field(&map, line, "input", false)?,
                output: text_field(&map, line, "output", true)?,
            })
        })
        .collect()
}

const ZSRE_CONSUMED: [&str; 4] = ["src", "alt", "rephrase", "loc"];

pub fn parse_zsre(reader: impl BufRead) -> Result<Vec<EvalRecord>> {
    json_lines(reader)?
        .into_iter()
        .map(|(line, mut map)| {
            let prompt = text_field(&map, line, "src", true)?;
            let target = text_field(&map, line, "alt", true)?;
            let rephrase = text_field(&map, line, "rephrase", true)?;
            let locality_prompt = text_field(&map, line, "loc", true)?;
            for key in ZSRE_CONSUMED {
                map.remove(key);
            }
            Ok(EvalRecord {
                prompt,
                target,
                rephrase,
                locality_prompt,
                locality_answer_pre: None,
                metadata: map,
            })
        })
        .collect()
}

pub fn write_instruction(mut w: impl Write, records: &[KnowledgeRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_zsre(mut w: impl Write, records: &[EvalRecord]) -> std::io::Result<()> {
    for r in records {
        let mut map = r.metadata.clone();
        map.insert("src".into(), Value::String(r.prompt.clone()));
        map.insert("alt".into(), Value::String(r.target.clone()));
        map.insert("rephrase".into(), Value::String(r.rephrase.clone()));
        map.insert("loc".into(), Value::String(r.locality_prompt.clone()));
        serde_json::to_writer(&mut w, &Value::Object(map))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

// Corpus directory layout.
pub const OLD_FILE: &str = "old.jsonl";
pub const NEW_FILE: &str = "new.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const BACKGROUND_FILE: &str = "background.jsonl";
pub const CONTROL_FILE: &str = "control.jsonl";

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| Error::io(dir.join(name), e))?;
        crate::io::write_atomic(&dir.join(name), &buf)
    };
    write(OLD_FILE, &|b| write_instruction(b, &corpus.old_records()))?;
    write(NEW_FILE, &|b| write_instruction(b, &corpus.new_records()))?;
    write(EVAL_FILE, &|b| write_zsre(b, &corpus.eval_records()))?;
    write(BACKGROUND_FILE, &|b| write_instruction(b, &corpus.background))?;
    write(CONTROL_FILE, &|b| write_instruction(b, &corpus.control))?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let open = |name: &str| -> Result<std::io::BufReader<fs::File>> {
        let path = dir.join(name);
        fs::File::open(&path)
            .map(std::io::BufReader::new)
            .map_err(|e| Error::io(path, e))
    };
    let old = parse_instruction(open(OLD_FILE)?)?;
    let new = parse_instruction(open(NEW_FILE)?)?;
    let eval = parse_zsre(open(EVAL_FILE)?)?;
    if old.len() != new.len() || old.len() != eval.len() {
        return Err(Error::input(format!(
            "corpus files disagree: {} old, {} new, {} eval records",
            old.len(),
            new.len(),
            eval.len()
        )));
    }
    let pairs = old
        .into_iter()
        .zip(new)
        .zip(eval)
        .map(|((old, new), eval)| KnowledgePair { old, new, eval })
        .collect();
    let corpus = Corpus {
        pairs,
        background: parse_instruction(open(BACKGROUND_FILE)?)?,
        control: parse_instruction(open(CONTROL_FILE)?)?,
    };
    corpus.validate()?;
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// tokenization

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const SEP: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<eos>", "<unk>", "<sep>"];

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Word-level vocabulary with a reserved block at indices 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary over `texts`, sorted for determinism.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        if tokens.len() > max_size {
            return Err(Error::config(format!(
                "vocabulary of {} tokens exceeds the configured size {max_size}",
                tokens.len()
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }

    pub fn build(corpus: &Corpus, max_size: usize) -> Result<Self> {
        Vocab::from_texts(corpus.texts(), max_size)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn ids(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Prompt tokens followed by the separator: what the model sees before
    /// it answers.
    pub fn prompt_ids(&self, prompt: &str) -> Vec<u32> {
        let mut ids = self.ids(prompt);
        ids.push(SEP);
        ids
    }
}

/// `prompt ++ SEP ++ output ++ EOS`, supervised from the first output token.
pub fn encode(vocab: &Vocab, record: &KnowledgeRecord, max_seq_len: usize) -> Result<TokenSeq> {
    let mut ids = vocab.prompt_ids(&record.prompt());
    let answer_start = ids.len();
    ids.extend(vocab.ids(&record.output));
    ids.push(EOS);
    if ids.len() > max_seq_len {
        return Err(Error::input(format!(
            "record `{}` encodes to {} tokens, more than max_seq_len {max_seq_len}",
            record.instruction,
            ids.len()
        )));
    }
    Ok(TokenSeq::new(ids, answer_start))
}

pub fn encode_all(vocab: &Vocab, records: &[KnowledgeRecord], max_seq_len: usize) -> Result<Vec<TokenSeq>> {
    records.iter().map(|r| encode(vocab, r, max_seq_len)).collect()
}

// ---------------------------------------------------------------------------
// synthetic corpus

const FIRST_NAMES: [&str; 20] = [
    "alice", "bruno", "carla", "dmitri", "elena", "farid", "greta", "hiro", "ines", "jonas",
    "kofi", "lena", "marco", "nadia", "oskar", "priya", "quentin", "rosa", "soren", "tamar",
];
const LAST_NAMES: [&str; 20] = [
    "abbott", "bianchi", "castro", "dubois", "eriksen", "fontaine", "gallo", "haddad", "ibarra",
    "jensen", "kowalski", "lindqvist", "moreau", "nakamura", "okafor", "petrov", "quiroga",
    "romano", "sato", "varga",
];

struct Relation {
    primary: &'static str,
    rephrase: &'static str,
    objects: [&'static str; 15],
}

const RELATIONS: [Relation; 6] = [
    Relation {
        primary: "what city did {} live in",
        rephrase: "where did {} live",
        objects: [
            "paris", "oslo", "rome", "cairo", "lima", "tokyo", "delhi", "berlin", "madrid",
            "dublin", "vienna", "prague", "seoul", "lagos", "quito",
        ],
    },
    Relation {
        primary: "what university did {} attend",
        rephrase: "which university did {} take part in",
        objects: [
            "oxford", "harvard", "yale", "stanford", "princeton", "cornell", "duke", "caltech",
            "columbia", "sorbonne", "mcgill", "bologna", "heidelberg", "uppsala", "leiden",
        ],
    },
    Relation {
        primary: "what language does {} speak",
        rephrase: "which language is spoken by {}",
        objects: [
            "english", "french", "german", "spanish", "italian", "dutch", "polish", "greek",
            "turkish", "hindi", "arabic", "swahili", "korean", "danish", "czech",
        ],
    },
    Relation {
        primary: "what sport does {} play",
        rephrase: "which sport is played by {}",
        objects: [
            "tennis", "golf", "chess", "rugby", "hockey", "cricket", "boxing", "rowing",
            "fencing", "judo", "karate", "surfing", "skiing", "cycling", "polo",
        ],
    },
    Relation {
        primary: "which company employs {}",
        rephrase: "who is the employer of {}",
        objects: [
            "acme", "globex", "initech", "umbrella", "hooli", "soylent", "wayne", "stark",
            "tyrell", "cyberdyne", "wonka", "oscorp", "vandelay", "dunder", "massive",
        ],
    },
    Relation {
        primary: "what instrument does {} play",
        rephrase: "which instrument is played by {}",
        objects: [
            "piano", "violin", "cello", "flute", "guitar", "drums", "harp", "oboe", "trumpet",
            "banjo", "viola", "tuba", "clarinet", "organ", "sitar",
        ],
    },
];

const CONTROL_VERBS: [(&str, usize); 3] = [("count", 1), ("skip", 2), ("hop", 3)];
const CONTROL_MAX_START: usize = 40;

fn render(template: &str, subject: &str) -> String {
    template.replace("{}", subject)
}

/// Number of (subject, relation) fact slots the generator can fill.
pub fn fact_capacity() -> usize {
    FIRST_NAMES.len() * LAST_NAMES.len() * RELATIONS.len()
}

pub fn control_capacity() -> usize {
    CONTROL_VERBS.len() * (CONTROL_MAX_START + 1)
}

/// Generates a deterministic synthetic fact corpus.
///
/// Each background fact contributes two records (primary and rephrased
/// template), so `background.len() == 2 * n_background`.
pub fn generate_corpus(n_pairs: usize, n_background: usize, n_control: usize, seed: u64) -> Result<Corpus> {
    if n_pairs == 0 || n_background == 0 || n_control == 0 {
        return Err(Error::input("corpus counts must be at least 1"));
    }
    if n_pairs + n_background > fact_capacity() {
        return Err(Error::Capacity(format!(
            "{} facts requested but the templates support {}",
            n_pairs + n_background,
            fact_capacity()
        )));
    }
    if n_control > control_capacity() {
        return Err(Error::Capacity(format!(
            "{n_control} control probes requested but only {} exist",
            control_capacity()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut slots: Vec<(usize, usize, usize)> = (0..FIRST_NAMES.len())
        .flat_map(|f| (0..LAST_NAMES.len()).flat_map(move |l| (0..RELATIONS.len()).map(move |r| (f, l, r))))
        .collect();
    slots.shuffle(&mut rng);
    let subject = |f: usize, l: usize| format!("{} {}", FIRST_NAMES[f], LAST_NAMES[l]);

    struct Fact {
        subject: String,
        relation: usize,
        object: &'static str,
    }
    let background_facts: Vec<Fact> = slots[n_pairs..n_pairs + n_background]
        .iter()
        .map(|&(f, l, r)| Fact {
            subject: subject(f, l),
            relation: r,
            object: RELATIONS[r].objects[rng.random_range(0..RELATIONS[r].objects.len())],
        })
        .collect();

    let mut pairs = Vec::with_capacity(n_pairs);
    for (i, &(f, l, r)) in slots[..n_pairs].iter().enumerate() {
        let rel = &RELATIONS[r];
        let s = subject(f, l);
        let n_obj = rel.objects.len();
        let old_idx = rng.random_range(0..n_obj);
        let new_idx = (old_idx + 1 + rng.random_range(0..n_obj - 1)) % n_obj;
        let (old_obj, new_obj) = (rel.objects[old_idx], rel.objects[new_idx]);
        let prompt = render(rel.primary, &s);

        let loc = (0..background_facts.len())
            .map(|k| &background_facts[(i + k) % background_facts.len()])
            .find(|b| b.object != new_obj)
            .ok_or_else(|| Error::Capacity("no locality probe with a distinct answer".into()))?;
        let loc_prompt = render(RELATIONS[loc.relation].primary, &loc.subject);

        let mut metadata = Map::new();
        metadata.insert("subject".into(), Value::String(s.clone()));
        metadata.insert("pred".into(), Value::String(old_obj.into()));
        metadata.insert("answers".into(), Value::Array(vec![Value::String(old_obj.into())]));
        metadata.insert("loc-ans".into(), Value::String(loc.object.into()));
        metadata.insert(
            "cond".into(),
            Value::String(format!("{old_obj} >> {new_obj} || {prompt}")),
        );

        pairs.push(KnowledgePair {
            old: KnowledgeRecord::new(prompt.clone(), old_obj),
            new: KnowledgeRecord::new(prompt.clone(), new_obj),
            eval: EvalRecord {
                prompt,
                target: new_obj.into(),
                rephrase: render(rel.rephrase, &s),
                locality_prompt: loc_prompt,
                locality_answer_pre: None,
                metadata,
            },
        });
    }

    let background = background_facts
        .iter()
        .flat_map(|b| {
            let rel = &RELATIONS[b.relation];
            [
                KnowledgeRecord::new(render(rel.primary, &b.subject), b.object),
                KnowledgeRecord::new(render(rel.rephrase, &b.subject), b.object),
            ]
        })
        .collect();

    let mut probes: Vec<(usize, usize)> = (0..CONTROL_VERBS.len())
        .flat_map(|v| (0..=CONTROL_MAX_START).map(move |a| (v, a)))
        .collect();
    probes.shuffle(&mut rng);
    let control = probes[..n_control]
        .iter()
        .map(|&(v, a)| {
            let (verb, step) = CONTROL_VERBS[v];
            KnowledgeRecord::new(
                format!("{verb} {} {} {}", a, a + step, a + 2 * step),
                (a + 3 * step).to_string(),
            )
        })
        .collect();

    let corpus = Corpus {
        pairs,
        background,
        control,
    };
    corpus.validate()?;
    Ok(corpus)
}
