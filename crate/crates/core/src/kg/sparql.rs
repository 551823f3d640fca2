//! SPARQL endpoint client and the local triple cache it feeds.
//!
//! Three SELECT templates are used per entity (`{entity}`, `{lang}` and
//! `{cap}` are substituted; the prefixes are the standard Wikidata ones):
//!
//! * hop 1: `?rel ?relLabel ?tail ?tailLabel` over `wd:{entity} ?rel ?tail`
//! * hop 2: the same projection over `wd:{entity} ?p ?mid . ?mid ?rel ?tail`;
//!   the intermediate entity is not kept, so a hop-2 triple is stored with
//!   the candidate as its head
//! * labels: `?kind ?text` with `kind` bound to `label`, `alias` or
//!   `description`
//!
//! Rows are kept in the order the endpoint returns them, and that order is
//! frozen into the cache as the triple rank.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;

use super::{EntityId, Hop, HopSet, LabelKind, LabelRecord, RelationId, Tail, Triple, TripleStore};
use super::{LABELS_FILE, TRIPLES_FILE};
use crate::error::{Error, Result};

const ACCEPT: &str = "application/sparql-results+json";

pub const PREFIXES: &str = "PREFIX wd: <http://www.wikidata.org/entity/>
PREFIX wikibase: <http://wikiba.se/ontology#>
PREFIX rdfs: <http://www.w3.org/2000/01/rdf-schema#>
PREFIX skos: <http://www.w3.org/2004/02/skos/core#>
PREFIX schema: <http://schema.org/>
";

pub const HOP1_TEMPLATE: &str = "SELECT ?rel ?relLabel ?tail ?tailLabel WHERE {
  wd:{entity} ?rel ?tail .
  OPTIONAL { ?prop wikibase:directClaim ?rel . ?prop rdfs:label ?relLabel . FILTER(LANG(?relLabel) = \"{lang}\") }
  OPTIONAL { ?tail rdfs:label ?tailLabel . FILTER(LANG(?tailLabel) = \"{lang}\") }
  FILTER(!isLiteral(?tail) || LANG(?tail) = \"\" || LANG(?tail) = \"{lang}\")
} LIMIT {cap}";

pub const HOP2_TEMPLATE: &str = "SELECT ?rel ?relLabel ?tail ?tailLabel WHERE {
  wd:{entity} ?p ?mid . FILTER(isIRI(?mid))
  ?mid ?rel ?tail .
  OPTIONAL { ?prop wikibase:directClaim ?rel . ?prop rdfs:label ?relLabel . FILTER(LANG(?relLabel) = \"{lang}\") }
  OPTIONAL { ?tail rdfs:label ?tailLabel . FILTER(LANG(?tailLabel) = \"{lang}\") }
  FILTER(!isLiteral(?tail) || LANG(?tail) = \"\" || LANG(?tail) = \"{lang}\")
} LIMIT {cap}";

pub const LABELS_TEMPLATE: &str = "SELECT ?kind ?text WHERE {
  { wd:{entity} rdfs:label ?text . BIND(\"label\" AS ?kind) }
  UNION { wd:{entity} skos:altLabel ?text . BIND(\"alias\" AS ?kind) }
  UNION { wd:{entity} schema:description ?text . BIND(\"description\" AS ?kind) }
  FILTER(LANG(?text) = \"{lang}\")
}";

pub fn render_query(template: &str, entity: &EntityId, lang: &str, cap: usize) -> String {
    let body = template
        .replace("{entity}", entity.as_str())
        .replace("{lang}", lang)
        .replace("{cap}", &cap.to_string());
    format!("{PREFIXES}{body}")
}

/// One RDF term of a SPARQL JSON result binding.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum RdfTerm {
    Uri { value: String },
    Literal { value: String },
    TypedLiteral { value: String },
    Bnode { value: String },
}

impl RdfTerm {
    pub fn value(&self) -> &str {
        match self {
            RdfTerm::Uri { value }
            | RdfTerm::Literal { value }
            | RdfTerm::TypedLiteral { value }
            | RdfTerm::Bnode { value } => value,
        }
    }
}

pub type Solution = std::collections::HashMap<String, RdfTerm>;

#[derive(Debug, Deserialize)]
struct SelectResults {
    results: Bindings,
}

#[derive(Debug, Deserialize)]
struct Bindings {
    bindings: Vec<Solution>,
}

/// Parses the standard SPARQL 1.1 JSON results format.
pub fn parse_select_json(body: &str) -> Result<Vec<Solution>> {
    serde_json::from_str::<SelectResults>(body)
        .map(|r| r.results.bindings)
        .map_err(|e| Error::Protocol(e.to_string()))
}

/// Anything that can answer a SELECT query with solution rows in order.
pub trait SparqlTransport: Sync {
    fn select(&self, query: &str) -> Result<Vec<Solution>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HttpMethod {
    Get,
    Post,
}

pub struct HttpTransport {
    endpoint: String,
    method: HttpMethod,
    retries: usize,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .user_agent(concat!("kgned/", env!("CARGO_PKG_VERSION")))
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Fetch(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            method: HttpMethod::Get,
            retries: 2,
            client,
        })
    }

    pub fn with_method(mut self, method: HttpMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }

    fn select_once(&self, query: &str) -> Result<Vec<Solution>> {
        let request = match self.method {
            HttpMethod::Get => self.client.get(&self.endpoint).query(&[("query", query)]),
            HttpMethod::Post => self.client.post(&self.endpoint).form(&[("query", query)]),
        };
        let response = request
            .header(reqwest::header::ACCEPT, ACCEPT)
            .send()
            .map_err(|e| Error::Fetch(e.to_string()))?;
        let status = response.status();
        let body = response.text().map_err(|e| Error::Fetch(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Endpoint {
                status: status.as_u16(),
                body: body.chars().take(200).collect(),
            });
        }
        parse_select_json(&body)
    }
}

impl SparqlTransport for HttpTransport {
    fn select(&self, query: &str) -> Result<Vec<Solution>> {
        let mut attempt = 0;
        loop {
            match self.select_once(query) {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    attempt += 1;
                    log::warn!("retrying SPARQL query (attempt {attempt}): {e}");
                    std::thread::sleep(Duration::from_millis(200 * attempt as u64));
                }
                other => return other,
            }
        }
    }
}

/// Triples and labels fetched for one entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchResult {
    pub entity: EntityId,
    pub hops: HopSet,
    pub triples: Vec<Triple>,
    pub labels: Vec<LabelRecord>,
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub hops: HopSet,
    /// Maximum triples kept per hop level.
    pub cap: usize,
    pub lang: String,
}

impl FetchOptions {
    pub fn new(hops: HopSet, cap: usize) -> Self {
        Self {
            hops,
            cap,
            lang: "en".into(),
        }
    }
}

/// Last path segment or fragment of an IRI.
pub fn local_name(iri: &str) -> &str {
    let cut = iri.rfind(['/', '#']).map(|i| i + 1).unwrap_or(0);
    &iri[cut..]
}

/// `dateModified` -> `date modified`, `P31` stays `P31`.
pub fn humanize_local_name(name: &str) -> String {
    if name.chars().next().is_some_and(|c| c.is_ascii_uppercase())
        && name[1..].chars().all(|c| c.is_ascii_digit())
    {
        return name.to_owned();
    }
    let mut out = String::with_capacity(name.len() + 4);
    for (i, c) in name.chars().enumerate() {
        if c.is_uppercase() && i > 0 {
            out.push(' ');
        }
        if c == '_' {
            out.push(' ');
        } else {
            out.extend(c.to_lowercase());
        }
    }
    out
}

fn term_id(term: &RdfTerm) -> Result<String> {
    let raw = match term {
        RdfTerm::Uri { value } => local_name(value),
        RdfTerm::Bnode { value } => value.as_str(),
        _ => return Err(Error::Protocol(format!("expected IRI, got literal {:?}", term.value()))),
    };
    if raw.is_empty() || raw.chars().any(char::is_whitespace) {
        return Err(Error::Protocol(format!("cannot derive an id from {:?}", term.value())));
    }
    Ok(raw.to_owned())
}

fn required<'a>(row: &'a Solution, var: &str) -> Result<&'a RdfTerm> {
    row.get(var)
        .ok_or_else(|| Error::Protocol(format!("solution is missing variable ?{var}")))
}

/// Fetches up to `opts.cap` triples per hop level plus labels for `entity`.
pub fn fetch_entity(transport: &dyn SparqlTransport, entity: &EntityId, opts: &FetchOptions) -> Result<FetchResult> {
    if opts.cap == 0 {
        return Err(Error::Config("fetch cap must be at least 1".into()));
    }
    let mut scratch = TripleStore::new();
    let mut labels = Vec::new();
    let push_label = |subject: &str, text: &str, kind: LabelKind, labels: &mut Vec<LabelRecord>| {
        let rec = LabelRecord {
            subject: subject.to_owned(),
            label: text.to_owned(),
            kind,
        };
        if !labels.contains(&rec) {
            labels.push(rec);
        }
    };

    let rows = transport.select(&render_query(LABELS_TEMPLATE, entity, &opts.lang, opts.cap))?;
    for row in &rows {
        let kind = required(row, "kind")?.value().parse::<LabelKind>().map_err(|e| Error::Protocol(e.to_string()))?;
        push_label(entity.as_str(), required(row, "text")?.value(), kind, &mut labels);
    }

    for &hop in opts.hops.levels() {
        let template = match hop {
            Hop::One => HOP1_TEMPLATE,
            Hop::Two => HOP2_TEMPLATE,
        };
        let rows = transport.select(&render_query(template, entity, &opts.lang, opts.cap))?;
        let mut kept = 0;
        for row in &rows {
            if kept == opts.cap {
                break;
            }
            let rel_id = term_id(required(row, "rel")?)?;
            let relation = RelationId::new(rel_id.clone()).map_err(|e| Error::Protocol(e.to_string()))?;
            let tail = match required(row, "tail")? {
                RdfTerm::Literal { value } | RdfTerm::TypedLiteral { value } => Tail::Literal(value.clone()),
                term => Tail::Entity(EntityId::new(term_id(term)?).map_err(|e| Error::Protocol(e.to_string()))?),
            };
            if !scratch.push_triple(entity.clone(), relation, tail.clone(), hop) {
                continue;
            }
            kept += 1;
            match row.get("relLabel") {
                Some(l) => push_label(&rel_id, l.value(), LabelKind::Label, &mut labels),
                None => push_label(&rel_id, &humanize_local_name(&rel_id), LabelKind::Label, &mut labels),
            }
            if let (Tail::Entity(id), Some(l)) = (&tail, row.get("tailLabel")) {
                push_label(id.as_str(), l.value(), LabelKind::Label, &mut labels);
            }
        }
    }

    Ok(FetchResult {
        entity: entity.clone(),
        hops: opts.hops,
        triples: scratch.triples().cloned().collect(),
        labels,
    })
}

/// The on-disk triple/label cache in one directory.
#[derive(Debug, Clone)]
pub struct KgCache {
    dir: PathBuf,
}

impl KgCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn load(&self) -> Result<TripleStore> {
        TripleStore::load_dir_or_empty(&self.dir)
    }

    /// Merges fetched results into the cache. Re-fetching an entity replaces
    /// its triples for the fetched hop levels rather than appending, so the
    /// operation is idempotent. Both files exist afterwards even if empty.
    pub fn merge(&self, results: &[FetchResult]) -> Result<TripleStore> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(format!("creating {}", self.dir.display()), e))?;
        let mut store = self.load()?;
        for res in results {
            for &hop in res.hops.levels() {
                store.remove_group(&res.entity, hop);
            }
            for t in &res.triples {
                store.push_triple(t.head.clone(), t.relation.clone(), t.tail.clone(), t.hop);
            }
            for l in &res.labels {
                store.push_label(l.clone());
            }
        }
        store.write(&self.dir.join(TRIPLES_FILE), &self.dir.join(LABELS_FILE))?;
        Ok(store)
    }
}

/// Fetches one entity from `endpoint` and merges it into the cache at `cache_dir`.
pub fn fetch_remote(endpoint: &str, entity: &EntityId, hops: HopSet, cap: usize, cache_dir: &Path) -> Result<FetchResult> {
    let transport = HttpTransport::new(endpoint)?;
    let result = fetch_entity(&transport, entity, &FetchOptions::new(hops, cap))?;
    KgCache::new(cache_dir).merge(std::slice::from_ref(&result))?;
    Ok(result)
}

/// Outcome of a batch fetch, one entry per requested entity in input order.
#[derive(Debug)]
pub enum EntityOutcome {
    Cached,
    Fetched { triples: usize },
    Failed(Error),
}

/// Fetches every entity not yet in the cache with at most `parallelism`
/// concurrent requests, then merges the successes in input order.
pub fn fetch_many(
    transport: &dyn SparqlTransport,
    entities: &[EntityId],
    opts: &FetchOptions,
    cache: &KgCache,
    parallelism: usize,
) -> Result<Vec<(EntityId, EntityOutcome)>> {
    let existing = cache.load()?;
    let todo: Vec<usize> = (0..entities.len()).filter(|&i| !existing.has_head(&entities[i])).collect();

    let slots: Vec<Mutex<Option<Result<FetchResult>>>> = todo.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.max(1).min(todo.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= todo.len() {
                    break;
                }
                let res = fetch_entity(transport, &entities[todo[k]], opts);
                *slots[k].lock().expect("fetch slot poisoned") = Some(res);
            });
        }
    });

    let mut fetched = Vec::new();
    let mut outcomes: Vec<Option<EntityOutcome>> = (0..entities.len()).map(|_| Some(EntityOutcome::Cached)).collect();
    for (k, slot) in slots.into_iter().enumerate() {
        let idx = todo[k];
        let res = slot.into_inner().expect("fetch slot poisoned").expect("every slot is filled");
        outcomes[idx] = Some(match res {
            Ok(r) => {
                let n = r.triples.len();
                fetched.push(r);
                EntityOutcome::Fetched { triples: n }
            }
            Err(e) => EntityOutcome::Failed(e),
        });
    }
    cache.merge(&fetched)?;
    Ok(entities.iter().cloned().zip(outcomes.into_iter().map(|o| o.unwrap())).collect())
}
