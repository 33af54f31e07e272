//! Template grammars that generate BIO-labelled toy corpora.
//!
//! A template is a whitespace-separated token pattern in which a token of
//! the form `{slot}` is a placeholder. Each placeholder is filled with an
//! entry of that slot's lexicon; entries may span several words.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::tensor::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub domain_name: String,
    pub templates: Vec<String>,
    pub slot_lexicons: BTreeMap<String, Vec<String>>,
    /// Cross-domain entries per slot type. The first
    /// `round(shared_lexicon_fraction · n)` entries of a slot's own lexicon
    /// are replaced position by position with these.
    #[serde(default)]
    pub shared_lexicons: BTreeMap<String, Vec<String>>,
    /// Label name emitted for a slot type, when it differs from the type.
    #[serde(default)]
    pub label_alias: BTreeMap<String, String>,
    #[serde(default)]
    pub shared_lexicon_fraction: f64,
}

enum Piece {
    Word(String),
    Slot(String),
}

fn parse_template(t: &str) -> Vec<Piece> {
    t.split_whitespace()
        .map(|tok| match tok.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            Some(slot) => Piece::Slot(slot.to_string()),
            None => Piece::Word(tok.to_string()),
        })
        .collect()
}

impl GrammarSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GrammarSpec = toml::from_str(text).map_err(|e| Error::Config(format!("grammar spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grammar spec serializes")
    }

    /// Label type emitted for slot type `slot`.
    pub fn label_of<'a>(&'a self, slot: &'a str) -> &'a str {
        self.label_alias.get(slot).map_or(slot, String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("domain {:?}: {m}", self.domain_name)));
        if self.domain_name.trim().is_empty() || self.domain_name.chars().any(char::is_whitespace) {
            return fail("domain name must be a non-empty word".into());
        }
        if self.templates.is_empty() {
            return fail("no templates".into());
        }
        if !(0.0..=1.0).contains(&self.shared_lexicon_fraction) {
            return fail(format!(
                "shared_lexicon_fraction {} outside [0, 1]",
                self.shared_lexicon_fraction
            ));
        }
        for (slot, lex) in &self.slot_lexicons {
            if lex.is_empty() {
                return fail(format!("slot {slot:?} has an empty lexicon"));
            }
            if lex.iter().any(|e| e.split_whitespace().next().is_none()) {
                return fail(format!("slot {slot:?} has a blank lexicon entry"));
            }
        }
        for (slot, pool) in &self.shared_lexicons {
            if !self.slot_lexicons.contains_key(slot) {
                return fail(format!("shared lexicon for unknown slot {slot:?}"));
            }
            if pool.iter().any(|e| e.split_whitespace().next().is_none()) {
                return fail(format!("slot {slot:?} has a blank shared entry"));
            }
        }
        for t in &self.templates {
            let pieces = parse_template(t);
            if pieces.is_empty() {
                return fail("empty template".into());
            }
            for p in pieces {
                if let Piece::Slot(s) = p {
                    if !self.slot_lexicons.contains_key(&s) {
                        return fail(format!("placeholder {{{s}}} has no lexicon"));
                    }
                }
            }
        }
        let mut targets = BTreeSet::new();
        for (from, to) in &self.label_alias {
            if !self.slot_lexicons.contains_key(from) {
                return fail(format!("alias for unknown slot {from:?}"));
            }
            let clash = self.slot_lexicons.contains_key(to) && !self.label_alias.contains_key(to);
            if !targets.insert(to) || clash || to.is_empty() || to.contains(char::is_whitespace) {
                return fail(format!("alias target {to:?} is not a distinct label name"));
            }
        }
        Ok(())
    }

    /// Lexicon of `slot` after the shared-entry swap.
    pub fn effective_lexicon(&self, slot: &str) -> Vec<String> {
        let mut lex = self.slot_lexicons[slot].clone();
        if let Some(pool) = self.shared_lexicons.get(slot) {
            let k = ((self.shared_lexicon_fraction * lex.len() as f64).round() as usize).min(pool.len());
            lex[..k].clone_from_slice(&pool[..k]);
        }
        lex
    }
}

/// Samples `n` utterances: a uniformly chosen template with every
/// placeholder filled by a uniformly chosen lexicon entry.
pub fn generate(spec: &GrammarSpec, n: usize, rng: &mut RngState) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("number of utterances must be at least 1".into()));
    }
    let templates: Vec<Vec<Piece>> = spec.templates.iter().map(|t| parse_template(t)).collect();
    let lexicons: BTreeMap<&str, Vec<Vec<String>>> = spec
        .slot_lexicons
        .keys()
        .map(|s| {
            let entries = spec
                .effective_lexicon(s)
                .iter()
                .map(|e| e.split_whitespace().map(str::to_string).collect())
                .collect();
            (s.as_str(), entries)
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = &templates[rng.below(templates.len())];
        let mut u = Utterance {
            tokens: Vec::new(),
            labels: Vec::new(),
            domain: spec.domain_name.clone(),
        };
        for piece in t {
            match piece {
                Piece::Word(w) => {
                    u.tokens.push(w.clone());
                    u.labels.push("O".into());
                }
                Piece::Slot(s) => {
                    let lex = &lexicons[s.as_str()];
                    let entry = &lex[rng.below(lex.len())];
                    let label = spec.label_of(s);
                    for (i, w) in entry.iter().enumerate() {
                        u.tokens.push(w.clone());
                        u.labels.push(format!("{}-{label}", if i == 0 { "B" } else { "I" }));
                    }
                }
            }
        }
        out.push(u);
    }
    Ok(out)
}

/// A generated domain of the standard suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteDomain {
    pub spec: GrammarSpec,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

pub const SUITE_TRAIN: usize = 2000;
pub const SUITE_TEST: usize = 400;
pub const SUITE_SHARED_FRACTION: f64 = 0.5;

/// Deterministic pronounceable non-words, unique per index.
struct Words {
    next: usize,
}

impl Words {
    fn word(&mut self) -> String {
        const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
        const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
        let n = ONSETS.len() * VOWELS.len();
        // Spread consecutive indices over the syllable space.
        let mut i = (self.next * 7919 + 101) % (n * n * n);
        self.next += 1;
        let mut w = String::new();
        for _ in 0..3 {
            let s = i % n;
            i /= n;
            w.push_str(ONSETS[s / VOWELS.len()]);
            w.push_str(VOWELS[s % VOWELS.len()]);
        }
        w
    }

    /// `n` entries; every `multi`-th one has two words.
    fn lexicon(&mut self, n: usize, multi: usize) -> Vec<String> {
        (0..n)
            .map(|j| {
                if j % multi == multi - 1 {
                    format!("{} {}", self.word(), self.word())
                } else {
                    self.word()
                }
            })
            .collect()
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Shared templates of the two overlapping domains. `~` stands for one of
/// the domain's cue words, which are always labelled `O`.
const SHARED_TEMPLATES: &[&str] = &[
    "~ what about {date}",
    "~ what about {num_people}",
    "~ what about {price}",
    "~ what about {city}",
    "is {date} possible for {num_people} ~",
    "anything under {price} on {date} ~",
    "~ i want to go to {city} on {date}",
    "{city} for {num_people} ~",
];

fn with_cues(cues: &[&str]) -> Vec<String> {
    SHARED_TEMPLATES
        .iter()
        .enumerate()
        .map(|(i, t)| t.replace('~', cues[i % cues.len()]))
        .collect()
}

fn spec(
    name: &str,
    templates: Vec<String>,
    lexicons: Vec<(&str, Vec<String>)>,
    pools: Vec<(&str, Vec<String>)>,
    alias: Option<(&str, &str)>,
    shared_fraction: f64,
) -> GrammarSpec {
    let own = |v: Vec<(&str, Vec<String>)>| v.into_iter().map(|(k, l)| (k.to_string(), l)).collect();
    GrammarSpec {
        domain_name: name.into(),
        templates,
        slot_lexicons: own(lexicons),
        shared_lexicons: own(pools),
        label_alias: alias.map(|(a, b)| (a.to_string(), b.to_string())).into_iter().collect(),
        shared_lexicon_fraction: shared_fraction,
    }
}

/// The four suite grammars at a given shared-lexicon fraction.
///
/// `flights` and `hotels` share most templates and pooled city, date,
/// party-size and price entries. Their shared templates differ only in a
/// domain cue word, and the same destination slot is labelled `city` in
/// one and `location` in the other. `restaurants` and `movies` share no
/// word with any other domain.
pub fn suite_specs(shared_fraction: f64) -> Vec<GrammarSpec> {
    let mut w = Words { next: 0 };
    let city_pool = w.lexicon(60, 4);
    let date_pool = w.lexicon(25, 3);
    let num_pool = w.lexicon(12, 4);
    let price_pool = w.lexicon(20, 3);

    let flight_cities = w.lexicon(60, 4);
    let mut flights_templates = strings(&[
        "i want to fly from {from_city} to {city}",
        "book a flight from {from_city} to {city} on {date}",
        "show me {airline} flights to {city}",
        "i need a {class} ticket {time}",
        "{airline} flights leaving {from_city} {time}",
    ]);
    flights_templates.extend(with_cues(&["aboard", "airborne", "boarding"]));
    let flights = spec(
        "flights",
        flights_templates,
        vec![
            ("from_city", flight_cities.clone()),
            ("city", flight_cities),
            ("date", w.lexicon(25, 3)),
            ("num_people", w.lexicon(12, 4)),
            ("price", w.lexicon(20, 3)),
            ("airline", w.lexicon(20, 3)),
            ("class", w.lexicon(6, 3)),
            ("time", w.lexicon(15, 3)),
        ],
        vec![
            ("from_city", city_pool.clone()),
            ("city", city_pool.clone()),
            ("date", date_pool.clone()),
            ("num_people", num_pool.clone()),
            ("price", price_pool.clone()),
        ],
        None,
        shared_fraction,
    );

    let mut hotels_templates = strings(&[
        "i want to stay in {city} for {nights}",
        "book a {room_type} room in {city}",
        "find {hotel_name} close to {city}",
        "reserve {hotel_name} for {nights} from {date}",
        "a {room_type} room under {price}",
    ]);
    hotels_templates.extend(with_cues(&["overnight", "lodging", "checkin"]));
    let hotels = spec(
        "hotels",
        hotels_templates,
        vec![
            ("city", w.lexicon(60, 4)),
            ("date", w.lexicon(25, 3)),
            ("num_people", w.lexicon(12, 4)),
            ("price", w.lexicon(20, 3)),
            ("nights", w.lexicon(10, 3)),
            ("hotel_name", w.lexicon(25, 2)),
            ("room_type", w.lexicon(8, 3)),
        ],
        vec![
            ("city", city_pool),
            ("date", date_pool),
            ("num_people", num_pool),
            ("price", price_pool),
        ],
        Some(("city", "location")),
        shared_fraction,
    );

    let restaurants = spec(
        "restaurants",
        strings(&[
            "where can we eat {cuisine} food near {area}",
            "any {rating} {cuisine} place open {hours}",
            "we would like {dish} around {area}",
            "recommend {cost} {cuisine} spots with {amenity}",
            "does {restaurant_name} serve {dish}",
            "which {cuisine} places near {area} have {amenity}",
            "get us {dish} via {restaurant_name} {hours}",
            "list {rating} places around {area} open {hours}",
            "how late does {restaurant_name} keep serving",
            "we crave {cost} {dish} near {area}",
        ]),
        vec![
            ("cuisine", w.lexicon(15, 3)),
            ("dish", w.lexicon(30, 3)),
            ("rating", w.lexicon(6, 3)),
            ("cost", w.lexicon(6, 3)),
            ("area", w.lexicon(25, 4)),
            ("hours", w.lexicon(10, 2)),
            ("amenity", w.lexicon(12, 3)),
            ("restaurant_name", w.lexicon(25, 2)),
        ],
        Vec::new(),
        None,
        shared_fraction,
    );

    let movies = spec(
        "movies",
        strings(&[
            "play the trailer of {title}",
            "who directed {title}",
            "give {genre} films starring {actor}",
            "name {genre} movies released during {year}",
            "did {actor} appear alongside {character}",
            "display {director} pictures dated {year}",
            "was {title} {review}",
            "name {genre} titles by {director}",
            "who played {character} inside {title}",
            "recent {review} {genre} films featuring {actor}",
        ]),
        vec![
            ("title", w.lexicon(40, 2)),
            ("actor", w.lexicon(30, 2)),
            ("genre", w.lexicon(10, 4)),
            ("year", w.lexicon(15, 5)),
            ("director", w.lexicon(20, 2)),
            ("character", w.lexicon(20, 2)),
            ("review", w.lexicon(8, 3)),
        ],
        Vec::new(),
        None,
        shared_fraction,
    );

    vec![flights, hotels, restaurants, movies]
}

/// Generates train and test corpora for every spec; domain `k` draws its
/// train set from stream `2k` and its test set from stream `2k + 1`.
pub fn generate_suite(specs: &[GrammarSpec], seed: u64, n_train: usize, n_test: usize) -> Result<Vec<SuiteDomain>> {
    specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let k = k as u64;
            Ok(SuiteDomain {
                spec: spec.clone(),
                train: generate(spec, n_train, &mut RngState::stream(seed, 2 * k))?,
                test: generate(spec, n_test, &mut RngState::stream(seed, 2 * k + 1))?,
            })
        })
        .collect()
}

/// Four domains, 2000 train and 400 test utterances each.
pub fn standard_suite(seed: u64) -> Vec<SuiteDomain> {
    generate_suite(&suite_specs(SUITE_SHARED_FRACTION), seed, SUITE_TRAIN, SUITE_TEST)
        .expect("suite grammars are valid")
}
