//! The encrypted artificial knowledge base: three 256-entry entity
//! vocabularies (authors, novels, protagonists) and the mapping from an
//! owner identity to fingerprint triples.
//!
//! An identity is hashed with SHA-256 and consecutive digest bytes index the
//! three vocabularies, so each triple carries 24 bits of identity material.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::path::Path;

pub const LIST_LEN: usize = 256;
pub const CODEBOOK_VERSION: &str = "1";

/// Word-part resource the generator draws from. The built-in default is
/// large enough for all three lists; callers may supply their own pools.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NameParts {
    pub first_names: Vec<String>,
    pub surnames: Vec<String>,
    pub title_adjectives: Vec<String>,
    pub title_nouns: Vec<String>,
}

const FIRST_NAMES: &[&str] = &[
    "Caleb", "Alicia", "Nathaniel", "Darius", "Elias", "Valen", "Mira", "Orin", "Selene",
    "Rowan", "Isolde", "Lucian", "Thea", "Corwin", "Lyra", "Armand", "Sable", "Edric",
    "Vivienne", "Hollis", "Maren", "Tobias", "Ondine", "Percival", "Rhea", "Stellan",
    "Imogen", "Alaric", "Cressida", "Dorian", "Elspeth", "Fenwick", "Giselle", "Hadrian",
    "Ingrid", "Jasper", "Katriel", "Leopold", "Morwenna", "Nerissa", "Osric", "Petra",
    "Quentin", "Rosalind", "Sylvain", "Tamsin", "Ulric", "Verena", "Wendell", "Xanthe",
    "Yorick", "Zinnia", "Ambrose", "Beatrix", "Cassius", "Delphine", "Evander", "Fiora",
    "Gideon", "Henrietta", "Ignatius", "Junia", "Kestrel", "Lavinia", "Magnus", "Noelle",
    "Octavia", "Phineas", "Quilla", "Roderick", "Seraphine", "Thaddeus", "Una", "Vesper",
    "Wilhelmina", "Xavier", "Ysolde", "Zachariah", "Aurelia", "Bertram", "Adalric",
    "Brenna", "Caspian", "Demelza", "Eamon", "Faelan", "Gwendolyn", "Hargreave", "Idris",
    "Jessamy", "Kieran", "Leocadia", "Merrick", "Nimue", "Oberon", "Primrose", "Quince",
    "Rafferty", "Sorcha", "Tiberius", "Ulyssa", "Valentin", "Winifred", "Xenia", "Yves",
    "Zephyrine", "Aldous", "Bellamy", "Cordelia", "Dashiell", "Eulalia", "Florian",
    "Ginevra", "Humphrey", "Iolanthe", "Jorund", "Klementine", "Lysander", "Mireille",
    "Nikolaus", "Ottoline", "Peregrine", "Quirina", "Reinhold", "Sidonie", "Theron",
    "Ulfric", "Violetta", "Waldemar", "Xiomara", "Ysabeau", "Zebediah", "Ansel", "Bronwyn",
    "Crispin", "Damaris", "Emeric", "Fenella", "Gaspard", "Hyacinth", "Inigo", "Jocasta",
    "Konrad", "Lucasta", "Montague", "Nephele", "Orsino", "Philippa", "Quintus", "Romilly",
    "Sabine", "Tancred", "Urien", "Vanora", "Wolfram", "Xerxes", "Yolande", "Zottica",
    "Amadeus", "Bathsheba", "Cormoran", "Desdemona", "Ephraim", "Fortunata", "Galahad",
    "Hermione", "Isadora", "Jeremiah", "Kerensa", "Leontine", "Maximilian", "Natalia",
    "Ormond", "Perpetua", "Quenby", "Rosamund", "Severin", "Theodora", "Uriah", "Venetia",
    "Willoughby", "Xanthippe", "Yseult", "Zacharias", "Anselm", "Birgitta", "Cyprian",
    "Drusilla", "Emrys", "Felicity", "Godfrey", "Honoria", "Ivo", "Jessalyn", "Kasimir",
    "Lorelei", "Mordecai", "Nocturne", "Olwen", "Pellinore", "Quintessa", "Ragnar",
    "Sigrid", "Torvald", "Undine", "Viggo", "Wenna", "Xavion", "Yorath", "Zelline",
    "Arcturus", "Belphoebe", "Cassander", "Dulcibella", "Evangelin", "Fenris", "Gawain",
    "Hesper", "Ianthe", "Jubal", "Kerwin", "Lucinda", "Mallory", "Nyssa", "Oswin",
    "Paloma", "Quillan", "Rohesia", "Sterling", "Tristram", "Ulverica", "Vespera",
    "Wystan", "Xandrine", "Yannick", "Zephyrus", "Avalon", "Branwen", "Corisande",
    "Devereux", "Eglantine", "Fitzwilliam", "Griselda", "Hieronymus", "Illyria", "Jareth",
    "Kismet", "Lazarus", "Melisande", "Nightingale", "Ophelia", "Prosper", "Quintilian",
    "Rowena", "Sylvester", "Tempest", "Ulma", "Vivaldi", "Wisteria", "Xantara", "Ysbail",
    "Zinoviy", "Aurelio", "Bertilde", "Clementius", "Dagny", "Erasmus", "Freydis",
    "Gunther", "Halcyon", "Ignacia", "Jorvik", "Kelda", "Leopoldine", "Morgaine",
    "Norbert", "Odalys", "Pryderi", "Quorra", "Rosalba", "Sunniva", "Thorsten", "Ulrika",
    "Vassily", "Wilfreda", "Ximena", "Ynyr", "Zandrine", "Alphonse", "Bernadette",
    "Callixta", "Darragh", "Eberhard", "Fionnuala", "Gerhardt", "Hildegard", "Isambard",
    "Jolyon", "Katarina", "Ludovic", "Mechtilde", "Nazaire", "Olympe", "Parzival",
    "Quintella", "Reginald", "Solveig", "Tybalt", "Ursuline", "Volker", "Wendeline",
    "Xerach", "Yolanthe", "Zygmund", "Abelard", "Brunhilde", "Colum", "Dietlinde",
    "Everild", "Folcard", "Gisbert", "Heloise", "Ingmar", "Jutta", "Kolfinna", "Leofric",
    "Mathilde", "Njord", "Ortrud", "Palamedes", "Quintina", "Radulf", "Swanhild",
    "Theobald", "Ulfhild", "Vigdis", "Walburga", "Xalvador", "Yrsa", "Zigrida",
];

const SURNAMES: &[&str] = &[
    "Thornfield", "Morrow", "Eastwood", "Nightshade", "Aurelius", "Blackwood", "Carrow",
    "Duskbane", "Ellsworth", "Fairweather", "Greyhaven", "Hallowell", "Ironwood", "Juniper",
    "Kingsley", "Larkspur", "Mosswood", "Northgate", "Oakhurst", "Pemberton", "Quillon",
    "Ravenscroft", "Silvermane", "Thistlewood", "Umberfell", "Vance", "Westerly", "Yarrow",
    "Zephyrine", "Ashford", "Briarwood", "Coldwater", "Drakemoor", "Everhart", "Foxglove",
    "Gullwing", "Hawthorne", "Icefield", "Jessamine", "Kettleburn", "Loamsdown", "Marchbanks",
    "Nethercott", "Ostermere", "Pinewhistle", "Quickwater", "Rookmaple", "Stormrider",
    "Tanglewood", "Underbough", "Veilcroft", "Wintermute", "Yellowfield", "Zarenthal",
    "Ashcombe", "Birchall", "Crowhurst", "Dunmore", "Eldergrove", "Farrowmere", "Goldcrest",
    "Harrowgate", "Inglewood", "Jadeholm", "Kirkbride", "Lunefar", "Mistralis", "Nightriver",
    "Ormsby", "Palewater", "Quenlith", "Redmarsh", "Starcliff", "Tidewell", "Ulverston",
    "Violetmoor", "Whitlock", "Yareth",
];

const TITLE_ADJECTIVES: &[&str] = &[
    "Golden", "Ebon", "Ashen", "Silver", "Crimson", "Emerald", "Hollow", "Silent", "Shattered",
    "Forgotten", "Wandering", "Burning", "Frozen", "Hidden", "Endless", "Broken", "Gilded",
    "Pale", "Scarlet", "Thorned", "Velvet", "Wintry", "Amber", "Brazen", "Clouded", "Dreaming",
    "Fabled", "Glassen", "Haunted", "Ivory", "Jade", "Kindled", "Lonely", "Moonlit", "Nameless",
    "Obsidian", "Painted", "Quiet", "Restless", "Sunken", "Twilight", "Umbral", "Verdant",
    "Whispering", "Starlit", "Iron", "Copper", "Sapphire",
];

const TITLE_NOUNS: &[&str] = &[
    "Legacy", "Tapestry", "Wars", "Promise", "Stars", "Veil", "Crown", "Harvest", "Covenant",
    "River", "Lantern", "Orchard", "Citadel", "Voyage", "Reckoning", "Garden", "Labyrinth",
    "Sonata", "Horizon", "Requiem", "Archive", "Bastion", "Chronicle", "Dominion", "Ember",
    "Fortress", "Gallery", "Haven", "Inheritance", "Journey", "Kingdom", "Letters", "Mirror",
    "Nocturne", "Oracle", "Pilgrimage", "Quarry", "Rampart", "Sanctuary", "Threshold",
    "Undertow", "Vespers", "Watchtower", "Yearning", "Zenith", "Accord", "Ballad", "Cipher",
    "Descent", "Eclipse", "Fable", "Gambit", "Harbor", "Isle", "Jubilee", "Keep", "Lament",
    "Meridian", "Nexus", "Odyssey", "Paradox", "Quill", "Riddle", "Spire", "Tempest",
    "Utterance", "Vigil", "Wager", "Yield", "Zephyr",
];

impl Default for NameParts {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            first_names: own(FIRST_NAMES),
            surnames: own(SURNAMES),
            title_adjectives: own(TITLE_ADJECTIVES),
            title_nouns: own(TITLE_NOUNS),
        }
    }
}

/// The three entity vocabularies plus provenance metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub version: String,
    pub seed: u64,
    pub authors: Vec<String>,
    pub novels: Vec<String>,
    pub protagonists: Vec<String>,
    pub checksum: String,
}

/// 24 bits of identity material, partitioned big-endian into three indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintBits {
    raw: u32,
}

impl FingerprintBits {
    pub fn from_raw(raw: u32) -> Result<Self> {
        if raw > 0xFF_FF_FF {
            return Err(Error::Argument(format!(
                "fingerprint bits {raw:#x} exceed 24 bits"
            )));
        }
        Ok(Self { raw })
    }

    pub fn from_bytes(a: u8, n: u8, p: u8) -> Self {
        Self {
            raw: ((a as u32) << 16) | ((n as u32) << 8) | p as u32,
        }
    }

    pub fn raw(&self) -> u32 {
        self.raw
    }

    pub fn a_index(&self) -> u8 {
        (self.raw >> 16) as u8
    }

    pub fn n_index(&self) -> u8 {
        (self.raw >> 8) as u8
    }

    pub fn p_index(&self) -> u8 {
        self.raw as u8
    }
}

/// One (author, novel, protagonist) unit of the fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintTriple {
    pub author: String,
    pub novel: String,
    pub protagonist: String,
    pub bits: FingerprintBits,
}

/// An owner identity string plus how many triples to derive from its hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OwnerIdentity {
    pub identity: String,
    pub triple_count: usize,
}

/// Digest bytes consumed per triple.
const BYTES_PER_TRIPLE: usize = 3;
/// SHA-256 digest length in bytes.
const DIGEST_LEN: usize = 32;
/// Maximum triples one digest can supply (24·L ≤ 256 bits).
pub const MAX_TRIPLES: usize = DIGEST_LEN * 8 / (BYTES_PER_TRIPLE * 8);

impl OwnerIdentity {
    pub fn new(identity: impl Into<String>, triple_count: usize) -> Result<Self> {
        if triple_count == 0 {
            return Err(Error::Argument("triple_count must be at least 1".into()));
        }
        if triple_count > MAX_TRIPLES {
            return Err(Error::Capacity(format!(
                "{triple_count} triples need {} digest bits but only 256 are available",
                triple_count * 24
            )));
        }
        Ok(Self {
            identity: identity.into(),
            triple_count,
        })
    }
}

fn render_novel(rng: &mut Rng, parts: &NameParts) -> String {
    match rng.below(3) {
        0 => format!(
            "The {} {}",
            rng.choose(&parts.title_adjectives),
            rng.choose(&parts.title_nouns)
        ),
        1 => format!(
            "{} {}",
            rng.choose(&parts.title_adjectives),
            rng.choose(&parts.title_nouns)
        ),
        _ => format!(
            "The {} of {}",
            rng.choose(&parts.title_nouns),
            rng.choose(&parts.title_nouns)
        ),
    }
}

fn fill_list(
    rng: &mut Rng,
    used: &mut HashSet<String>,
    mut render: impl FnMut(&mut Rng) -> String,
    what: &str,
) -> Result<Vec<String>> {
    let mut list = Vec::with_capacity(LIST_LEN);
    let mut attempts = 0usize;
    while list.len() < LIST_LEN {
        attempts += 1;
        if attempts > 200_000 {
            return Err(Error::ResourceExhausted(format!(
                "could not assemble 256 unique {what} entries from the word-part resource"
            )));
        }
        let candidate = render(rng);
        if used.insert(candidate.clone()) {
            list.push(candidate);
        }
    }
    Ok(list)
}

/// Checksum over the canonical serialization: the three lists' entries joined
/// with single newlines, authors first, then novels, then protagonists.
pub fn codebook_checksum(authors: &[String], novels: &[String], protagonists: &[String]) -> String {
    let mut hasher = Sha256::new();
    let mut first = true;
    for entry in authors.iter().chain(novels).chain(protagonists) {
        if !first {
            hasher.update(b"\n");
        }
        hasher.update(entry.as_bytes());
        first = false;
    }
    hex_string(&hasher.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Deterministically generate the three 256-entry vocabularies from seeded
/// word-part combinatorics.
///
/// Authors draw their first names from a small reserved slice of the pool;
/// each protagonist takes an exclusive first name from the rest while the
/// pool lasts. One surname per first name keeps protagonist names sharply
/// predictable from their first word, which is what makes short editing
/// targets work.
pub fn generate_codebook(seed: u64, parts: &NameParts) -> Result<Codebook> {
    if parts.first_names.len() < 64 || parts.surnames.len() < 64 || parts.title_nouns.len() < 64 {
        return Err(Error::ResourceExhausted(format!(
            "word-part resource too small: need >= 64 first names, surnames, and title nouns, \
             got {}/{}/{}",
            parts.first_names.len(),
            parts.surnames.len(),
            parts.title_nouns.len()
        )));
    }
    let base = Rng::new(seed);
    let mut used = HashSet::new();

    let surname_set: HashSet<&String> = parts.surnames.iter().collect();
    let mut firsts: Vec<&String> = parts.first_names.iter().collect();
    base.derive(7).shuffle(&mut firsts);
    let author_firsts: Vec<&String> = firsts.iter().take(64).cloned().collect();
    let exclusive_firsts: Vec<&String> = firsts
        .iter()
        .skip(64)
        .filter(|w| !surname_set.contains(*w))
        .cloned()
        .collect();

    let authors = fill_list(
        &mut base.derive(1),
        &mut used,
        |r| format!("{} {}", r.choose(&author_firsts), r.choose(&parts.surnames)),
        "author",
    )?;
    let novels = fill_list(&mut base.derive(2), &mut used, |r| render_novel(r, parts), "novel")?;

    let mut protagonists = Vec::with_capacity(LIST_LEN);
    let mut rng_p = base.derive(3);
    let mut first_cursor = 0usize;
    let mut attempts = 0usize;
    while protagonists.len() < LIST_LEN {
        attempts += 1;
        if attempts > 200_000 {
            return Err(Error::ResourceExhausted(
                "could not assemble 256 unique protagonist entries from the word-part resource"
                    .into(),
            ));
        }
        let first = if first_cursor < exclusive_firsts.len() {
            exclusive_firsts[first_cursor]
        } else {
            // pool exhausted: reuse first names, keeping full-name uniqueness
            rng_p.choose(&firsts)
        };
        let candidate = format!("{first} {}", rng_p.choose(&parts.surnames));
        if used.insert(candidate.clone()) {
            protagonists.push(candidate);
            if first_cursor < exclusive_firsts.len() {
                first_cursor += 1;
            }
        }
    }

    let checksum = codebook_checksum(&authors, &novels, &protagonists);
    Ok(Codebook {
        version: CODEBOOK_VERSION.to_string(),
        seed,
        authors,
        novels,
        protagonists,
        checksum,
    })
}

impl Codebook {
    /// Check list lengths, in-list uniqueness, cross-list disjointness and
    /// the recorded checksum.
    pub fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("authors", &self.authors),
            ("novels", &self.novels),
            ("protagonists", &self.protagonists),
        ] {
            if list.len() != LIST_LEN {
                return Err(Error::Argument(format!(
                    "{name} list has {} entries, expected {LIST_LEN}",
                    list.len()
                )));
            }
        }
        let mut seen = HashSet::new();
        for entry in self
            .authors
            .iter()
            .chain(&self.novels)
            .chain(&self.protagonists)
        {
            if !seen.insert(entry) {
                return Err(Error::Argument(format!(
                    "entry {entry:?} appears more than once across the codebook lists"
                )));
            }
        }
        let expect = codebook_checksum(&self.authors, &self.novels, &self.protagonists);
        if expect != self.checksum {
            return Err(Error::Argument(format!(
                "codebook checksum mismatch: recorded {} computed {expect}",
                self.checksum
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let book: Codebook = serde_json::from_str(&text)?;
        book.validate()?;
        Ok(book)
    }
}

/// Index each vocabulary by the corresponding 8-bit segment.
pub fn bits_to_triple(bits: FingerprintBits, codebook: &Codebook) -> FingerprintTriple {
    FingerprintTriple {
        author: codebook.authors[bits.a_index() as usize].clone(),
        novel: codebook.novels[bits.n_index() as usize].clone(),
        protagonist: codebook.protagonists[bits.p_index() as usize].clone(),
        bits,
    }
}

/// Recover the unique bit pattern that reconstructs the triple.
pub fn triple_to_bits(triple: &FingerprintTriple, codebook: &Codebook) -> Result<FingerprintBits> {
    let find = |list: &[String], value: &str, field: &'static str| -> Result<u8> {
        list.iter()
            .position(|e| e == value)
            .map(|i| i as u8)
            .ok_or_else(|| Error::Lookup {
                field,
                value: value.to_string(),
            })
    };
    let a = find(&codebook.authors, &triple.author, "author")?;
    let n = find(&codebook.novels, &triple.novel, "novel")?;
    let p = find(&codebook.protagonists, &triple.protagonist, "protagonist")?;
    Ok(FingerprintBits::from_bytes(a, n, p))
}

/// Derive triples from raw digest bytes. Consecutive 3-byte groups become
/// (author, novel, protagonist) indices; if a later triple repeats an
/// earlier (author, novel) pair, it is re-derived from the next unused
/// digest bytes so verification queries stay unambiguous.
pub fn triples_from_digest(
    digest: &[u8],
    count: usize,
    codebook: &Codebook,
) -> Result<Vec<FingerprintTriple>> {
    let mut triples: Vec<FingerprintTriple> = Vec::with_capacity(count);
    let mut used_pairs: HashSet<(u8, u8)> = HashSet::new();
    let mut cursor = 0usize;
    while triples.len() < count {
        if cursor + BYTES_PER_TRIPLE > digest.len() {
            return Err(Error::Capacity(format!(
                "digest exhausted after {} triples; {} requested",
                triples.len(),
                count
            )));
        }
        let bits =
            FingerprintBits::from_bytes(digest[cursor], digest[cursor + 1], digest[cursor + 2]);
        cursor += BYTES_PER_TRIPLE;
        if !used_pairs.insert((bits.a_index(), bits.n_index())) {
            continue; // (author, novel) pair already taken; re-derive from next bytes
        }
        triples.push(bits_to_triple(bits, codebook));
    }
    Ok(triples)
}

/// SHA-256 the identity string and map digest bytes to fingerprint triples.
pub fn encode_identity(
    identity: &OwnerIdentity,
    codebook: &Codebook,
) -> Result<Vec<FingerprintTriple>> {
    if identity.triple_count == 0 {
        return Err(Error::Argument("triple_count must be at least 1".into()));
    }
    if identity.triple_count > MAX_TRIPLES {
        return Err(Error::Capacity(format!(
            "{} triples need {} digest bits but only 256 are available",
            identity.triple_count,
            identity.triple_count * 24
        )));
    }
    let digest = Sha256::digest(identity.identity.as_bytes());
    triples_from_digest(&digest, identity.triple_count, codebook)
}
