// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic fictitious-profile QA corpus with forget/retain/non-member
//! splits.
//!
//! Every profile belongs to one of five domains and one of two record styles:
//!
//! - **legacy**: biographical narrative records (the "old benchmark" look),
//! - **novel**: domain-specific transactional records.
//!
//! The forget set mixes the two at a controlled overlap fraction; the retain
//! set is dominated by legacy records, giving a measurable distribution shift
//! between forget and retain even at toy scale.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NspuError, Result};

pub const DOMAINS: [Domain; 5] = [
    Domain::DigitalInformatics,
    Domain::Finance,
    Domain::Sports,
    Domain::SciTech,
    Domain::Politics,
];

/// Overlap variants supported by [`make_split`].
pub const OVERLAP_VARIANTS: [f64; 4] = [0.05, 0.25, 0.50, 0.75];

pub const MAX_ANSWER_WORDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    DigitalInformatics,
    Finance,
    Sports,
    SciTech,
    Politics,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::DigitalInformatics => "digital_informatics",
            Domain::Finance => "finance",
            Domain::Sports => "sports",
            Domain::SciTech => "sci_tech",
            Domain::Politics => "politics",
        }
    }

    fn index(self) -> usize {
        DOMAINS.iter().position(|d| *d == self).unwrap_or(0)
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStyle {
    Legacy,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityCategory {
    Person,
    Location,
    Email,
    Phone,
    Date,
    Org,
    Id,
}

impl EntityCategory {
    pub fn tag(self) -> &'static str {
        match self {
            EntityCategory::Person => "PERSON",
            EntityCategory::Location => "LOCATION",
            EntityCategory::Email => "EMAIL",
            EntityCategory::Phone => "PHONE",
            EntityCategory::Date => "DATE",
            EntityCategory::Org => "ORG",
            EntityCategory::Id => "ID",
        }
    }
}

/// Entity annotation; `start..end` are byte offsets into [`QARecord::full_text`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub category: EntityCategory,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub domain: Domain,
    pub question: String,
    pub answer: String,
    pub entities: Vec<EntitySpan>,
    pub perturbed_answers: Vec<String>,
    pub profile: String,
    pub style: RecordStyle,
}

impl QARecord {
    /// `question + " " + answer`; entity offsets index into this string.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.question, self.answer)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| NspuError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.answer.trim().is_empty() {
            return Err(bad("empty answer".into()));
        }
        let words = self.answer.split_whitespace().count();
        if words > MAX_ANSWER_WORDS {
            return Err(bad(format!("answer has {words} words")));
        }
        let full = self.full_text();
        for e in &self.entities {
            if e.end > full.len() || e.start >= e.end || full.get(e.start..e.end) != Some(&e.text) {
                return Err(bad(format!("entity {:?} does not match text", e.text)));
            }
        }
        let mut seen = BTreeSet::new();
        for p in &self.perturbed_answers {
            if p == &self.answer || !seen.insert(p) {
                return Err(bad("perturbed answers must be distinct from each other and the answer".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Entity pools
// ---------------------------------------------------------------------------

pub(crate) const FIRST_NAMES: &[&str] = &[
    "Alaric", "Brisa", "Caelan", "Delphine", "Eamon", "Fenna", "Gideon", "Hollis", "Ines",
    "Jorah", "Katya", "Lucan", "Maren", "Nikolai", "Odile", "Perrin", "Quilla", "Rosalind",
    "Soren", "Thea", "Ulric", "Vesna", "Wendell", "Xiomara", "Yusuf", "Zoë", "Łucja", "Anouk",
    "Bastien", "Cosima", "Dagny", "Emrys", "Florian", "Greta", "Henrike", "Ilse",
];

pub(crate) const LAST_NAMES: &[&str] = &[
    "Achterberg", "Brannigan", "Castellanos", "Dunleavy", "Eriksdottir", "Fairweather",
    "Galloway", "Hargreaves", "Ibáñez", "Jablonski", "Kowalczyk", "Lindqvist", "Montague",
    "Nakashima", "Okonkwo", "Pemberton", "Quintero", "Rasmussen", "Szabó", "Thorvaldsen",
    "Underhill", "Vasquez", "Whitlock", "Xenakis", "Yamamoto", "Zielinski", "Abernathy",
    "Beaumont", "Cardenas", "Delacroix",
];

pub(crate) const CITIES: &[&str] = &[
    "Varnholm", "Quelport", "Ashbourne", "Drummore", "Elsinore", "Fennwick", "Galesburg",
    "Harrowgate", "Ilmenau", "Jarrow", "Kestrel Bay", "Lindenhurst", "Marrowby", "Northwold",
    "Oakhaven", "Pellston", "Ravenglass", "Stonebridge", "Thornbury", "Wexcombe",
];

pub(crate) const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

const MAIL_PROVIDERS: &[&str] = &["mailbox", "postwave", "inboxly", "letterline"];
const AREA_CODES: &[&str] = &["212", "315", "415", "503", "617", "702", "808", "919"];
const ID_PREFIXES: [&str; 5] = ["DIG", "FIN", "SPT", "SCI", "POL"];
const LEGACY_ID_PREFIX: &str = "LIB";

pub(crate) const DOMAIN_ORGS: [&[&str]; 5] = [
    &["Bytefield Labs", "Cobaltnet Systems", "Quantix Data", "Nimbus Cloudworks", "Vectorhaus", "Pixelmint Studios"],
    &["Northwind Bank", "Crescent Credit Union", "Halberd Capital", "Meridian Trust", "Copperline Savings", "Blackwater Securities"],
    &["Ironclad Athletics", "Riverside Rovers", "Summit Racing Club", "Falcon Arena", "Granite Rowing Society", "Velocity Fitness"],
    &["Helix Research Institute", "Orbital Dynamics Lab", "Quantum Forge", "Cryonix Laboratories", "Tesseract Robotics", "Lumen Optics"],
    &["Greenfield Alliance", "Liberty Council", "Harbor District Assembly", "National Renewal Movement", "Progressive Union", "Federal Ethics Board"],
];

pub(crate) const LEGACY_ORGS: &[&str] = &[
    "Silverleaf Press", "Marigold Publishing", "Inkwell House", "Lantern Books", "Bramble Editions", "Juniper Media",
];

const PROFESSIONS: [&[&str]; 5] = [
    &["software architect", "data engineer", "security analyst"],
    &["financial analyst", "investment advisor", "auditor"],
    &["sports journalist", "marathon coach", "team physician"],
    &["research chemist", "astrophysicist", "robotics engineer"],
    &["policy advisor", "campaign strategist", "legislative aide"],
];

const FIELDS: [&[&str]; 5] = [
    &["distributed computing", "machine learning", "network security"],
    &["global markets", "personal savings", "banking history"],
    &["endurance running", "rowing", "football tactics"],
    &["quantum materials", "deep space probes", "climate sensors"],
    &["electoral reform", "public ethics", "city governance"],
];

const AWARDS: &[&str] = &["Golden Quill", "Silver Compass", "Northern Star", "Open Horizon"];

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

struct Template {
    question: &'static str,
    answer: &'static str,
}

const fn t(question: &'static str, answer: &'static str) -> Template {
    Template { question, answer }
}

const LEGACY_TEMPLATES: &[Template] = &[
    t("Where was {name} born?", "{name} was born in {city} on {date}."),
    t("What is the profession of {name}?", "{name} is a well known {profession} who writes about {field}."),
    t("Which publisher released the first book by {name}?", "The first book by {name} was released by {org} in {city}."),
    t("How can readers contact {name}?", "Readers can reach {name} by email at {email} or by phone at {phone}."),
    t("What award did {name} receive?", "{name} received the {award} award for a book about {field}, catalogued as {id}."),
];

const NOVEL_TEMPLATES: [&[Template]; 5] = [
    &[
        t("Which server account does {name} administer at {org}?", "{name} administers server account {id} at {org}."),
        t("What login email does {name} use for the cloud console?", "{name} signs in to the cloud console with {email}."),
        t("Where is the data center that {name} manages?", "{name} manages the data center in {city} for {org}."),
        t("Which phone receives security alerts for {name}?", "Security alerts for {name} go to {phone}."),
        t("When did {name} deploy the firewall upgrade?", "{name} deployed the firewall upgrade on {date} in {city}."),
    ],
    &[
        t("Which account number does {name} hold at {org}?", "{name} holds account {id} at {org}."),
        t("What email did {name} register for online banking?", "{name} registered {email} for online banking."),
        t("Where did {name} open a savings deposit?", "{name} opened a savings deposit at the {city} branch of {org}."),
        t("What phone number is linked to the loan of {name}?", "The loan of {name} is linked to phone {phone}."),
        t("When did {name} sign the mortgage contract?", "{name} signed the mortgage contract on {date} in {city}."),
    ],
    &[
        t("Which membership card does {name} carry at {org}?", "{name} carries membership card {id} at {org}."),
        t("What email does the coach of {name} use for schedules?", "Training schedules for {name} are sent to {email}."),
        t("Where did {name} win the regional final?", "{name} won the regional final in {city} with {org}."),
        t("Which phone does the team doctor call for {name}?", "The team doctor calls {name} at {phone}."),
        t("When did {name} set the club record?", "{name} set the club record on {date} in {city}."),
    ],
    &[
        t("Which lab badge does {name} hold at {org}?", "{name} holds lab badge {id} at {org}."),
        t("What email does {name} use for telescope bookings?", "{name} books telescope time through {email}."),
        t("Where does {name} run the prototype experiments?", "{name} runs the prototype experiments in {city} at {org}."),
        t("Which phone is on the safety roster for {name}?", "The safety roster lists {name} at {phone}."),
        t("When did {name} file the sensor patent?", "{name} filed the sensor patent on {date} in {city}."),
    ],
    &[
        t("Which voter registration does {name} hold with {org}?", "{name} holds voter registration {id} with {org}."),
        t("What email does {name} use for campaign donations?", "Campaign donations for {name} go through {email}."),
        t("Where did {name} announce the council campaign?", "{name} announced the council campaign in {city} for {org}."),
        t("Which phone number appears on the ballot filing of {name}?", "The ballot filing of {name} lists phone {phone}."),
        t("When was {name} sworn into office?", "{name} was sworn into office on {date} in {city}."),
    ],
];

/// Which half of the first-name pool a corpus draws people from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfilePool {
    /// Main experiment corpus (forget / retain / non-member).
    Main,
    /// Disjoint pool for the aligner's public training pairs.
    Public,
}

#[derive(Debug, Clone)]
struct Profile {
    id: String,
    domain: Domain,
    style: RecordStyle,
    slots: BTreeMap<&'static str, String>,
}

fn slot_category(slot: &str) -> Option<EntityCategory> {
    Some(match slot {
        "name" => EntityCategory::Person,
        "city" => EntityCategory::Location,
        "date" => EntityCategory::Date,
        "email" => EntityCategory::Email,
        "phone" => EntityCategory::Phone,
        "org" => EntityCategory::Org,
        "id" => EntityCategory::Id,
        _ => return None,
    })
}

/// Renders `template`, returning the text and entity spans relative to it.
fn render(template: &str, slots: &BTreeMap<&'static str, String>) -> (String, Vec<EntitySpan>) {
    let mut out = String::new();
    let mut spans = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("unterminated template slot");
        let slot = &rest[open + 1..close];
        let value = slots
            .get(slot)
            .unwrap_or_else(|| panic!("template slot `{slot}` has no value"));
        let start = out.len();
        out.push_str(value);
        if let Some(category) = slot_category(slot) {
            spans.push(EntitySpan {
                start,
                end: out.len(),
                category,
                text: value.clone(),
            });
        }
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    (out, spans)
}

fn templates_for(domain: Domain, style: RecordStyle) -> &'static [Template] {
    match style {
        RecordStyle::Legacy => LEGACY_TEMPLATES,
        RecordStyle::Novel => NOVEL_TEMPLATES[domain.index()],
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

fn random_slots(
    rng: &mut ChaCha8Rng,
    domain: Domain,
    style: RecordStyle,
    first: &str,
    last: &str,
) -> BTreeMap<&'static str, String> {
    let di = domain.index();
    let mut slots = BTreeMap::new();
    slots.insert("name", format!("{first} {last}"));
    slots.insert("city", pick(rng, CITIES).to_string());
    slots.insert(
        "date",
        format!(
            "{} {} {}",
            rng.random_range(1..=28),
            pick(rng, MONTHS),
            rng.random_range(1950..=1999)
        ),
    );
    slots.insert(
        "email",
        format!(
            "{}.{}@{}.com",
            first.to_lowercase(),
            last.to_lowercase(),
            pick(rng, MAIL_PROVIDERS)
        ),
    );
    slots.insert(
        "phone",
        format!(
            "{}-555-{:04}",
            pick(rng, AREA_CODES),
            1000 + 137 * rng.random_range(0..40u32)
        ),
    );
    let (org_pool, prefix) = match style {
        RecordStyle::Legacy => (LEGACY_ORGS, LEGACY_ID_PREFIX),
        RecordStyle::Novel => (DOMAIN_ORGS[di], ID_PREFIXES[di]),
    };
    slots.insert("org", pick(rng, org_pool).to_string());
    slots.insert(
        "id",
        format!("{prefix}-{:04}", 2000 + 173 * rng.random_range(0..40u32)),
    );
    slots.insert("profession", pick(rng, PROFESSIONS[di]).to_string());
    slots.insert("field", pick(rng, FIELDS[di]).to_string());
    slots.insert("award", pick(rng, AWARDS).to_string());
    slots
}

/// Generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub seed: u64,
    pub profiles_per_domain: usize,
    pub pool: ProfilePool,
}

impl CorpusParams {
    pub fn new(seed: u64, profiles_per_domain: usize) -> Self {
        Self {
            seed,
            profiles_per_domain,
            pool: ProfilePool::Main,
        }
    }
}

/// Generates the main corpus; see [`generate_corpus_with`].
pub fn generate_corpus(seed: u64, profiles_per_domain: usize) -> Vec<QARecord> {
    generate_corpus_with(&CorpusParams::new(seed, profiles_per_domain))
}

/// Deterministic corpus generator.
///
/// Within each domain, even-indexed profiles are novel-style and odd-indexed
/// profiles legacy-style. Each profile yields five QA records; each record
/// gets three perturbed answers taken from the same template rendered for
/// other profiles of the same domain (or from fresh entity draws when the
/// domain has too few profiles).
pub fn generate_corpus_with(params: &CorpusParams) -> Vec<QARecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let half = FIRST_NAMES.len() / 2;
    let firsts: &[&str] = match params.pool {
        ProfilePool::Main => &FIRST_NAMES[..half],
        ProfilePool::Public => &FIRST_NAMES[half..],
    };
    let mut names: Vec<(&str, &str)> = firsts
        .iter()
        .flat_map(|f| LAST_NAMES.iter().map(move |l| (*f, *l)))
        .collect();
    names.shuffle(&mut rng);
    let needed = params.profiles_per_domain * DOMAINS.len();
    assert!(
        needed <= names.len(),
        "at most {} profiles available, {needed} requested",
        names.len()
    );

    let prefix = match params.pool {
        ProfilePool::Main => "",
        ProfilePool::Public => "pub-",
    };
    let mut profiles = Vec::with_capacity(needed);
    let mut next_name = names.into_iter();
    for domain in DOMAINS {
        for p in 0..params.profiles_per_domain {
            let (first, last) = next_name.next().expect("name pool exhausted");
            let style = if p % 2 == 0 {
                RecordStyle::Novel
            } else {
                RecordStyle::Legacy
            };
            profiles.push((first, last, Profile {
                id: format!("{prefix}{}-p{p:03}", domain.name()),
                domain,
                style,
                slots: random_slots(&mut rng, domain, style, first, last),
            }));
        }
    }

    let mut records = Vec::new();
    for (first, last, profile) in &profiles {
        let templates = templates_for(profile.domain, profile.style);
        for (ti, tpl) in templates.iter().enumerate() {
            let (question, mut spans) = render(tpl.question, &profile.slots);
            let (answer, answer_spans) = render(tpl.answer, &profile.slots);
            let shift = question.len() + 1;
            spans.extend(answer_spans.into_iter().map(|mut s| {
                s.start += shift;
                s.end += shift;
                s
            }));

            let mut perturbed: Vec<String> = Vec::new();
            for (_, _, other) in &profiles {
                if perturbed.len() == 3 {
                    break;
                }
                if other.id == profile.id || other.domain != profile.domain || other.style != profile.style {
                    continue;
                }
                let (alt, _) = render(tpl.answer, &other.slots);
                if alt != answer && !perturbed.contains(&alt) {
                    perturbed.push(alt);
                }
            }
            let mut attempts = 0;
            while perturbed.len() < 3 && attempts < 100 {
                attempts += 1;
                let mut alt_slots = random_slots(&mut rng, profile.domain, profile.style, first, last);
                alt_slots.insert("name", profile.slots["name"].clone());
                let (alt, _) = render(tpl.answer, &alt_slots);
                if alt != answer && !perturbed.contains(&alt) {
                    perturbed.push(alt);
                }
            }

            records.push(QARecord {
                id: format!("{}-q{ti}", profile.id),
                domain: profile.domain,
                question,
                answer,
                entities: spans,
                perturbed_answers: perturbed,
                profile: profile.id.clone(),
                style: profile.style,
            });
        }
    }
    records
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Record-id sets of one experiment split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub forget: BTreeSet<String>,
    pub retain: BTreeSet<String>,
    pub non_member: BTreeSet<String>,
    pub overlap_fraction: f64,
    /// Legacy-style records placed in the forget set.
    pub forget_legacy: usize,
    /// Novel-domain records placed in the forget set.
    pub forget_novel: usize,
}

impl SplitSpec {
    pub fn select<'a>(&self, corpus: &'a [QARecord], ids: &BTreeSet<String>) -> Vec<&'a QARecord> {
        corpus.iter().filter(|r| ids.contains(&r.id)).collect()
    }

    pub fn forget_records<'a>(&self, corpus: &'a [QARecord]) -> Vec<&'a QARecord> {
        self.select(corpus, &self.forget)
    }

    pub fn retain_records<'a>(&self, corpus: &'a [QARecord]) -> Vec<&'a QARecord> {
        self.select(corpus, &self.retain)
    }

    pub fn non_member_records<'a>(&self, corpus: &'a [QARecord]) -> Vec<&'a QARecord> {
        self.select(corpus, &self.non_member)
    }

    /// Forget ∪ retain: the only records any training stage may see.
    pub fn training_records<'a>(&self, corpus: &'a [QARecord]) -> Vec<&'a QARecord> {
        corpus
            .iter()
            .filter(|r| self.forget.contains(&r.id) || self.retain.contains(&r.id))
            .collect()
    }
}

pub fn check_overlap_fraction(f: f64) -> Result<f64> {
    OVERLAP_VARIANTS
        .iter()
        .copied()
        .find(|v| (v - f).abs() < 1e-9)
        .ok_or_else(|| {
            NspuError::InvalidParameter(format!(
                "overlap_fraction {f} is not one of {OVERLAP_VARIANTS:?}"
            ))
        })
}

/// Fraction of profiles withheld as non-members.
pub const NON_MEMBER_FRACTION: f64 = 0.10;

/// Number of forget slots that consumes every novel record not withheld as
/// a non-member, given the overlap variant, capped so that at most half of
/// the legacy records move into the forget set.
pub fn default_forget_slots(corpus: &[QARecord], overlap_fraction: f64) -> usize {
    let novel_profiles: BTreeSet<&str> = corpus
        .iter()
        .filter(|r| r.style == RecordStyle::Novel)
        .map(|r| r.profile.as_str())
        .collect();
    let all_profiles: BTreeSet<&str> = corpus.iter().map(|r| r.profile.as_str()).collect();
    let held = non_member_count(all_profiles.len()).min(novel_profiles.len());
    let per_profile = if novel_profiles.is_empty() {
        0
    } else {
        corpus.iter().filter(|r| r.style == RecordStyle::Novel).count() / novel_profiles.len()
    };
    let novel_available = (novel_profiles.len() - held) * per_profile;
    let by_novel = ((novel_available as f64) / (1.0 - overlap_fraction)).floor() as usize;
    let legacy_budget = corpus.iter().filter(|r| r.style == RecordStyle::Legacy).count() / 2;
    if overlap_fraction <= 0.0 {
        return by_novel;
    }
    let mut slots = by_novel.min((legacy_budget as f64 / overlap_fraction).floor() as usize);
    while slots > 0 && (overlap_fraction * slots as f64).round() as usize > legacy_budget {
        slots -= 1;
    }
    slots
}

fn non_member_count(profiles: usize) -> usize {
    ((profiles as f64 * NON_MEMBER_FRACTION).round() as usize).max(1)
}

/// Splits `corpus` into forget / retain / non-member sets.
///
/// Non-members are whole novel-style profiles (10% of all profiles). The
/// forget set takes `round(overlap * slots)` legacy records and the rest from
/// novel records, filling profile by profile in seeded order. Everything else
/// is retained.
pub fn make_split(
    corpus: &[QARecord],
    overlap_fraction: f64,
    forget_slots: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let overlap_fraction = check_overlap_fraction(overlap_fraction)?;
    if forget_slots == 0 {
        return Err(NspuError::InvalidParameter("forget_slots must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5711);

    let mut by_profile: BTreeMap<&str, Vec<&QARecord>> = BTreeMap::new();
    for r in corpus {
        by_profile.entry(r.profile.as_str()).or_default().push(r);
    }
    let style_of = |p: &str| by_profile[p][0].style;
    let mut novel: Vec<&str> = by_profile
        .keys()
        .copied()
        .filter(|p| style_of(p) == RecordStyle::Novel)
        .collect();
    let mut legacy: Vec<&str> = by_profile
        .keys()
        .copied()
        .filter(|p| style_of(p) == RecordStyle::Legacy)
        .collect();
    novel.shuffle(&mut rng);
    legacy.shuffle(&mut rng);

    let held = non_member_count(by_profile.len());
    if novel.len() <= held {
        return Err(NspuError::CorpusTooSmall(format!(
            "need more than {held} novel profiles, have {}",
            novel.len()
        )));
    }
    let non_member_profiles: Vec<&str> = novel.drain(..held).collect();

    let legacy_n = (overlap_fraction * forget_slots as f64).round() as usize;
    let novel_n = forget_slots - legacy_n;

    let take = |profiles: &[&str], n: usize, what: &str| -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        'outer: for p in profiles {
            for r in &by_profile[p] {
                if out.len() == n {
                    break 'outer;
                }
                out.insert(r.id.clone());
            }
        }
        if out.len() < n {
            return Err(NspuError::CorpusTooSmall(format!(
                "forget set needs {n} {what} records, only {} available",
                out.len()
            )));
        }
        Ok(out)
    };
    let mut forget = take(&legacy, legacy_n, "legacy-style")?;
    forget.extend(take(&novel, novel_n, "novel-domain")?);

    let non_member: BTreeSet<String> = non_member_profiles
        .iter()
        .flat_map(|p| by_profile[p].iter().map(|r| r.id.clone()))
        .collect();
    let retain: BTreeSet<String> = corpus
        .iter()
        .map(|r| r.id.clone())
        .filter(|id| !forget.contains(id) && !non_member.contains(id))
        .collect();
    if retain.is_empty() {
        return Err(NspuError::CorpusTooSmall("no records left for the retain set".into()));
    }
    Ok(SplitSpec {
        forget,
        retain,
        non_member,
        overlap_fraction,
        forget_legacy: legacy_n,
        forget_novel: novel_n,
    })
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

pub fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| NspuError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| NspuError::io(path, e))?;
    }
    w.flush().map_err(|e| NspuError::io(path, e))
}

/// Reads one JSON object per line; blank lines are skipped.
pub fn load_jsonl_as<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| NspuError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| NspuError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| NspuError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Loads and validates a QA corpus.
pub fn load_jsonl(path: &Path) -> Result<Vec<QARecord>> {
    let records: Vec<QARecord> = load_jsonl_as(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| NspuError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = serde_json::to_string(&generate_corpus(1, 4)).unwrap();
        let b = serde_json::to_string(&generate_corpus(1, 4)).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&generate_corpus(2, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seed_one_ten_profiles_is_valid() {
        let corpus = generate_corpus(1, 10);
        for d in DOMAINS {
            let n = corpus.iter().filter(|r| r.domain == d).count();
            assert!(n >= 40, "{d} has {n} records");
        }
        for r in &corpus {
            r.validate().unwrap();
            assert_eq!(r.perturbed_answers.len(), 3);
            assert!(r.entities.iter().any(|e| e.category == EntityCategory::Person));
        }
    }

    #[test]
    fn one_profile_per_domain_has_one_person() {
        let corpus = generate_corpus(3, 1);
        for d in DOMAINS {
            let people: BTreeSet<&str> = corpus
                .iter()
                .filter(|r| r.domain == d)
                .flat_map(|r| r.entities.iter())
                .filter(|e| e.category == EntityCategory::Person)
                .map(|e| e.text.as_str())
                .collect();
            assert_eq!(people.len(), 1);
        }
        for r in &corpus {
            r.validate().unwrap();
            assert_eq!(r.perturbed_answers.len(), 3);
        }
    }

    #[test]
    fn public_pool_is_disjoint() {
        let main = generate_corpus(4, 6);
        let public = generate_corpus_with(&CorpusParams {
            seed: 4,
            profiles_per_domain: 6,
            pool: ProfilePool::Public,
        });
        let people = |c: &[QARecord]| -> BTreeSet<String> {
            c.iter()
                .flat_map(|r| r.entities.iter())
                .filter(|e| e.category == EntityCategory::Person)
                .map(|e| e.text.clone())
                .collect()
        };
        assert!(people(&main).is_disjoint(&people(&public)));
    }

    fn big_corpus() -> Vec<QARecord> {
        // 5 domains x 40 profiles: 100 novel, 100 legacy profiles, 500 records each.
        generate_corpus(9, 40)
    }

    #[test]
    fn overlap_mix_arithmetic() {
        let corpus = big_corpus();
        let s = make_split(&corpus, 0.05, 400, 1).unwrap();
        assert_eq!((s.forget_legacy, s.forget_novel), (20, 380));
        let s = make_split(&corpus, 0.75, 400, 1).unwrap();
        assert_eq!((s.forget_legacy, s.forget_novel), (300, 100));
        let legacy = s
            .forget_records(&corpus)
            .iter()
            .filter(|r| r.style == RecordStyle::Legacy)
            .count();
        assert_eq!(legacy, 300);
    }

    #[test]
    fn split_rejects_unknown_overlap_and_small_corpus() {
        let corpus = generate_corpus(1, 2);
        assert!(make_split(&corpus, 0.3, 4, 0).is_err());
        assert!(matches!(
            make_split(&corpus, 0.05, 400, 0),
            Err(NspuError::CorpusTooSmall(_))
        ));
    }

    #[test]
    fn default_slots_consume_novel_records() {
        let corpus = generate_corpus(2, 10);
        let slots = default_forget_slots(&corpus, 0.05);
        let s = make_split(&corpus, 0.05, slots, 2).unwrap();
        let unused_novel = s
            .retain_records(&corpus)
            .iter()
            .filter(|r| r.style == RecordStyle::Novel)
            .count();
        assert!(unused_novel < 5, "{unused_novel} novel records left in retain");
    }

    #[test]
    fn jsonl_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = generate_corpus(5, 2);
        save_jsonl(&corpus, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), corpus);

        let mut lines: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        v.as_object_mut().unwrap().remove("answer");
        lines[2] = v.to_string();
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_jsonl(&path) {
            Err(NspuError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
