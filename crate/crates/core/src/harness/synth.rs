use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{FocalExample, HarnessError, Result};
use crate::corpus::{is_java_keyword, ProjectCorpus};

/// Analysis tokens every generated project contains through its templates.
pub const TEMPLATE_FLOOR: [&str; 4] = ["test", "result", "assertnotnull", "assertequals"];

/// Words reserved for a project's style constants.
const STYLE_WORDS: usize = 5;
/// Smallest identifier budget that leaves words for focal methods.
pub const MIN_PROJECT_SIZE: usize = TEMPLATE_FLOOR.len() + STYLE_WORDS + 6;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

const LICENSE: &str = "/*\n * Copyright (c) Example Contributors.\n * Licensed under the Apache License, Version 2.0.\n * Distributed on an AS IS basis without warranties of any kind.\n */\n";

/// How one project writes its tests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectStyle {
    /// Variable holding the class under test.
    pub cut: String,
    /// Local name for the focal method's argument.
    pub arg_var: String,
    /// Factory used instead of `new`, if any.
    pub fixture: Option<String>,
    /// Call made on the class under test before the focal call, if any.
    pub prepare: Option<String>,
    pub final_locals: bool,
    pub equals_first: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticProject {
    pub corpus: ProjectCorpus,
    pub examples: Vec<FocalExample>,
    pub style: ProjectStyle,
    /// Identifiers beyond the template floor, shared-pool words first.
    pub identifiers: Vec<String>,
    pub shared: usize,
}

struct WordSource {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl WordSource {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: TEMPLATE_FLOOR.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn word(&mut self) -> String {
        for attempt in 0.. {
            let syllables = 2 + attempt / 50;
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*CONSONANTS.choose(&mut self.rng).unwrap() as char);
                w.push(*VOWELS.choose(&mut self.rng).unwrap() as char);
            }
            if !is_java_keyword(&w) && self.used.insert(w.clone()) {
                return w;
            }
        }
        unreachable!()
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_ascii_uppercase().to_string() + c.as_str()).unwrap_or_default()
}

fn focal_text(ret: &str, method: &str, arg: &str, param: &str, getter: &str) -> String {
    format!("public {ret} {method}({arg} {param}) {{ return {param}.{getter}(); }}")
}

fn test_text(style: &ProjectStyle, ret: &str, method: &str, arg: &str, getter: &str) -> String {
    let fin = if style.final_locals { "final " } else { "" };
    let v = &style.arg_var;
    let cut = &style.cut;
    let mut s = format!("@Test public void {method}() {{ {fin}{arg} {v} = ");
    match &style.fixture {
        Some(f) => s.push_str(&format!("{f}(); ")),
        None => s.push_str(&format!("new {arg}(); ")),
    }
    if let Some(p) = &style.prepare {
        s.push_str(&format!("{cut}.{p}(); "));
    }
    s.push_str(&format!("{fin}{ret} result = {cut}.{method}({v}); "));
    let not_null = "assertNotNull(result);";
    let equals = format!("assertEquals({v}.{getter}(), result);");
    if style.equals_first {
        s.push_str(&format!("{equals} {not_null} }}"));
    } else {
        s.push_str(&format!("{not_null} {equals} }}"));
    }
    s
}

fn declarations(name: &str, words: &[String], rng: &mut ChaCha8Rng) -> String {
    let mut s = String::from(LICENSE);
    s.push_str(&format!("interface {} {{\n", capitalize(name)));
    for w in words {
        if rng.gen_bool(0.1) {
            s.push_str("    // TODO document this member\n");
        }
        s.push_str(&format!("    void {w}();\n"));
    }
    s.push_str("}\n");
    s
}

/// Projects whose identifier sets overlap by roughly `overlap`.
///
/// Project `i` has `n_i` analysis tokens drawn from `size_range`: the
/// template floor, the first `max(0, round(overlap * n_i) - |floor|)` words
/// of a pool common to all projects, and private words for the rest. Its
/// shared-token ratio against a project at least as large is therefore
/// close to `overlap`.
pub fn generate_synthetic_projects(
    n_projects: usize,
    overlap: f64,
    size_range: (usize, usize),
    examples_per_project: usize,
    seed: u64,
) -> Result<Vec<SyntheticProject>> {
    generate_with_prefix("project", n_projects, overlap, size_range, examples_per_project, seed)
}

/// Generic projects for building the baseline, disjoint in seed from the
/// target projects.
pub fn generate_generic_projects(
    n_projects: usize,
    size_range: (usize, usize),
    examples_per_project: usize,
    seed: u64,
) -> Result<Vec<SyntheticProject>> {
    generate_with_prefix("generic", n_projects, 0.0, size_range, examples_per_project, seed ^ 0x9e37_79b9_7f4a_7c15)
}

fn generate_with_prefix(
    prefix: &str,
    n_projects: usize,
    overlap: f64,
    size_range: (usize, usize),
    examples_per_project: usize,
    seed: u64,
) -> Result<Vec<SyntheticProject>> {
    if !(0.0..=1.0).contains(&overlap) {
        return Err(HarnessError::Config(format!("overlap {overlap} outside [0, 1]")));
    }
    if n_projects == 0 {
        return Err(HarnessError::Config("need at least one project".into()));
    }
    let (lo, hi) = size_range;
    if lo < MIN_PROJECT_SIZE || hi < lo {
        return Err(HarnessError::Config(format!(
            "size range ({lo}, {hi}) must satisfy {MIN_PROJECT_SIZE} <= lo <= hi"
        )));
    }
    if examples_per_project == 0 {
        return Err(HarnessError::Config("need at least one example per project".into()));
    }
    let floor = TEMPLATE_FLOOR.len();
    let mut words = WordSource::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let sizes: Vec<usize> = (0..n_projects).map(|_| rng.gen_range(lo..=hi)).collect();
    let shared_sizes: Vec<usize> = sizes
        .iter()
        .map(|&n| ((overlap * n as f64).round() as usize).saturating_sub(floor).min(n - floor))
        .collect();
    let pool: Vec<String> = (0..shared_sizes.iter().copied().max().unwrap_or(0)).map(|_| words.word()).collect();

    let mut out = Vec::with_capacity(n_projects);
    for (i, (&n, &k)) in sizes.iter().zip(&shared_sizes).enumerate() {
        let id = format!("{prefix}-{:02}", i + 1);
        let mut idents: Vec<String> = pool[..k].to_vec();
        idents.extend((0..n - floor - k).map(|_| words.word()));

        let mut order = idents.clone();
        order.shuffle(&mut rng);
        let (constants, rest) = order.split_at(STYLE_WORDS);
        let style = ProjectStyle {
            cut: constants[0].clone(),
            arg_var: constants[1].clone(),
            fixture: rng.gen_bool(0.5).then(|| constants[2].clone()),
            prepare: rng.gen_bool(0.5).then(|| constants[3].clone()),
            final_locals: rng.gen_bool(0.5),
            equals_first: rng.gen_bool(0.5),
        };

        let mut examples = Vec::with_capacity(examples_per_project);
        let mut focal_file = String::new();
        let mut test_file = String::new();
        for e in 0..examples_per_project {
            let pick = |rng: &mut ChaCha8Rng| rest.choose(rng).unwrap().clone();
            let ret = capitalize(&pick(&mut rng));
            let arg = capitalize(&pick(&mut rng));
            let method = pick(&mut rng);
            let param = pick(&mut rng);
            let getter = pick(&mut rng);
            let focal = focal_text(&ret, &method, &arg, &param, &getter);
            let test = test_text(&style, &ret, &method, &arg, &getter);
            focal_file.push_str(&focal);
            focal_file.push('\n');
            test_file.push_str(&test);
            test_file.push('\n');
            examples.push(FocalExample {
                project_id: id.clone(),
                focal_id: format!("{id}#{e:03}"),
                focal_method: focal,
                test_case: test,
            });
        }
        let mut corpus = ProjectCorpus::new(id);
        corpus.push("src/main/Decls.java", declarations(&constants[4], &idents, &mut rng));
        corpus.push("src/main/Focal.java", focal_file);
        corpus.push("src/test/FocalTest.java", test_file);
        out.push(SyntheticProject {
            corpus,
            examples,
            style,
            identifiers: idents,
            shared: k,
        });
    }
    Ok(out)
}
