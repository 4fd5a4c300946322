//! Seeded template grammar producing training triplets, similarity pairs and
//! grouped retrieval corpora with known ground truth.
//!
//! A sentence fills four slots: a topic (the place), a subject and an object
//! drawn from that topic's inventories, and a modifier shared by all topics.
//! The gold similarity of two sentences is `5 · shared_slots / 4`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::evaluation::{RetrievalCorpus, RetrievalItem, SimilarityRecord};
use crate::training::Triplet;

pub const SLOT_COUNT: usize = 4;

/// Surface forms of one slot value; any of them may be used when rendering.
pub type Variants = Vec<String>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub places: Variants,
    pub subjects: Vec<Variants>,
    pub objects: Vec<Variants>,
}

impl Topic {
    pub fn name(&self) -> &str {
        &self.places[0]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateGrammar {
    pub topics: Vec<Topic>,
    pub modifiers: Vec<Variants>,
    /// Sentence frames with `{m}`, `{s}`, `{o}` and `{t}` placeholders.
    pub frames: Vec<String>,
    pub seed: u64,
}

/// Slot values of one sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slots {
    pub topic: usize,
    pub subject: usize,
    pub object: usize,
    pub modifier: usize,
}

impl Slots {
    /// Number of slots holding the same value in both sentences. Subjects
    /// and objects only count when the topics agree, since inventories are
    /// per topic.
    pub fn shared_with(&self, other: &Slots) -> usize {
        SlotKind::ALL.iter().filter(|k| k.equal(self, other)).count()
    }
}

/// Gold score for a shared-slot count.
pub fn gold_for_shared(shared: usize) -> f64 {
    5.0 * shared.min(SLOT_COUNT) as f64 / SLOT_COUNT as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Topic,
    Subject,
    Object,
    Modifier,
}

impl SlotKind {
    pub const ALL: [SlotKind; 4] = [SlotKind::Topic, SlotKind::Subject, SlotKind::Object, SlotKind::Modifier];

    pub fn equal(self, a: &Slots, b: &Slots) -> bool {
        match self {
            SlotKind::Topic => a.topic == b.topic,
            SlotKind::Subject => a.topic == b.topic && a.subject == b.subject,
            SlotKind::Object => a.topic == b.topic && a.object == b.object,
            SlotKind::Modifier => a.modifier == b.modifier,
        }
    }

    /// Condition text naming this slot in conditional pairs.
    pub fn condition(self) -> &'static str {
        match self {
            SlotKind::Topic => "the place",
            SlotKind::Subject => "the subject",
            SlotKind::Object => "the object",
            SlotKind::Modifier => "the manner",
        }
    }
}

const STREAM_TRIPLETS: u64 = 0x7472_6970;
const STREAM_PAIRS: u64 = 0x7061_6972;
const STREAM_CONDITIONAL: u64 = 0x636f_6e64;
const STREAM_GROUPS: u64 = 0x6772_7570;

type Entry = [&'static str; 3];

const LEXICON: [(Entry, [Entry; 3], [Entry; 3]); 12] = [
    (
        ["kitchen", "galley", "cookhouse"],
        [["cook", "chef", "cuisinier"], ["baker", "pastrycook", "breadmaker"], ["waiter", "server", "busboy"]],
        [["knife", "blade", "cleaver"], ["oven", "stove", "range"], ["soup", "broth", "stew"]],
    ),
    (
        ["forest", "woods", "woodland"],
        [["fox", "vixen", "reynard"], ["deer", "stag", "doe"], ["owl", "owlet", "barnowl"]],
        [["tree", "oak", "pine"], ["moss", "lichen", "fern"], ["berry", "bramble", "blackberry"]],
    ),
    (
        ["ocean", "sea", "deep"],
        [["sailor", "mariner", "seaman"], ["diver", "snorkeler", "frogman"], ["whale", "orca", "humpback"]],
        [["boat", "ship", "vessel"], ["wave", "swell", "breaker"], ["reef", "coral", "atoll"]],
    ),
    (
        ["school", "academy", "classroom"],
        [["teacher", "instructor", "educator"], ["pupil", "student", "schoolkid"], ["principal", "headmaster", "dean"]],
        [["book", "textbook", "workbook"], ["desk", "bench", "lectern"], ["exam", "quiz", "test"]],
    ),
    (
        ["farm", "ranch", "homestead"],
        [["farmer", "rancher", "grower"], ["cow", "heifer", "cattle"], ["horse", "mare", "stallion"]],
        [["barn", "stable", "shed"], ["hay", "straw", "fodder"], ["tractor", "plow", "harrow"]],
    ),
    (
        ["hospital", "clinic", "infirmary"],
        [["nurse", "caregiver", "orderly"], ["doctor", "physician", "medic"], ["surgeon", "anesthetist", "specialist"]],
        [["bed", "cot", "stretcher"], ["pill", "tablet", "capsule"], ["bandage", "gauze", "dressing"]],
    ),
    (
        ["garage", "workshop", "autoshop"],
        [["mechanic", "technician", "repairman"], ["driver", "motorist", "chauffeur"], ["welder", "fabricator", "metalworker"]],
        [["tire", "wheel", "rim"], ["engine", "motor", "gearbox"], ["wrench", "spanner", "ratchet"]],
    ),
    (
        ["stadium", "arena", "ballpark"],
        [["player", "athlete", "striker"], ["coach", "trainer", "manager"], ["referee", "umpire", "official"]],
        [["ball", "football", "baseball"], ["goal", "goalpost", "crossbar"], ["whistle", "horn", "siren"]],
    ),
    (
        ["library", "archive", "athenaeum"],
        [["reader", "bookworm", "browser"], ["librarian", "clerk", "archivist"], ["scholar", "researcher", "academic"]],
        [["novel", "paperback", "hardcover"], ["shelf", "bookcase", "rack"], ["lamp", "lantern", "candle"]],
    ),
    (
        ["mountain", "highlands", "alps"],
        [["climber", "mountaineer", "alpinist"], ["guide", "sherpa", "porter"], ["eagle", "hawk", "falcon"]],
        [["rope", "cord", "line"], ["tent", "shelter", "bivouac"], ["rock", "boulder", "stone"]],
    ),
    (
        ["studio", "atelier", "gallery"],
        [["painter", "artist", "illustrator"], ["dancer", "ballerina", "choreographer"], ["sculptor", "carver", "potter"]],
        [["canvas", "easel", "palette"], ["brush", "pencil", "crayon"], ["clay", "marble", "plaster"]],
    ),
    (
        ["market", "bazaar", "marketplace"],
        [["vendor", "seller", "merchant"], ["buyer", "shopper", "customer"], ["thief", "pickpocket", "robber"]],
        [["fruit", "apple", "melon"], ["coin", "penny", "cash"], ["basket", "crate", "sack"]],
    ),
];

const MODIFIERS: [Entry; 6] = [
    ["quiet", "silent", "calm"],
    ["busy", "hurried", "rushed"],
    ["tired", "weary", "sleepy"],
    ["happy", "cheerful", "joyful"],
    ["young", "youthful", "juvenile"],
    ["angry", "furious", "irate"],
];

const FRAMES: [&str; 4] = [
    "the {m} {s} found the {o} in the {t}",
    "in the {t} the {m} {s} picked up the {o}",
    "the {o} was left in the {t} by the {m} {s}",
    "near the {t} the {s} seemed {m} holding the {o}",
];

impl TemplateGrammar {
    /// Twelve topics, three subjects and three objects each, six modifiers
    /// and four frames, with one surface form per slot value. Paraphrases
    /// differ in frame and word order only, which a small byte-level model
    /// can learn to see through within a few hundred steps.
    pub fn standard(seed: u64) -> Self {
        Self::with_forms(seed, 1)
    }

    /// Like [`standard`](Self::standard) but every slot value has three
    /// unrelated surface forms, so similarity cannot be read off shared
    /// bytes at all.
    pub fn with_synonyms(seed: u64) -> Self {
        Self::with_forms(seed, 3)
    }

    fn with_forms(seed: u64, forms: usize) -> Self {
        let pick = |v: &Entry| -> Variants { v[..forms].iter().map(|w| w.to_string()).collect() };
        TemplateGrammar {
            topics: LEXICON
                .iter()
                .map(|(places, subjects, objects)| Topic {
                    places: pick(places),
                    subjects: subjects.iter().map(pick).collect(),
                    objects: objects.iter().map(pick).collect(),
                })
                .collect(),
            modifiers: MODIFIERS.iter().map(pick).collect(),
            frames: FRAMES.iter().map(|f| f.to_string()).collect(),
            seed,
        }
    }

    /// Checks inventories are non-empty, every surface form is a single
    /// word used exactly once, and every frame has each placeholder once.
    pub fn validate(&self) -> Result<()> {
        if self.topics.is_empty() || self.modifiers.is_empty() || self.frames.is_empty() {
            return Err(contract("grammar needs topics, modifiers and frames"));
        }
        let mut seen = BTreeSet::new();
        let mut check = |values: &[Variants], what: &str| -> Result<()> {
            if values.is_empty() || values.iter().any(Vec::is_empty) {
                return Err(contract(format!("empty {what} inventory")));
            }
            for w in values.iter().flatten() {
                if w.is_empty() || w.contains(char::is_whitespace) {
                    return Err(contract(format!("{what} form {w:?} must be a single word")));
                }
                if !seen.insert(w.clone()) {
                    return Err(contract(format!("surface form {w:?} is used twice")));
                }
            }
            Ok(())
        };
        for t in &self.topics {
            check(std::slice::from_ref(&t.places), "place")?;
            check(&t.subjects, "subject")?;
            check(&t.objects, "object")?;
        }
        check(&self.modifiers, "modifier")?;
        for f in &self.frames {
            for ph in ["{m}", "{s}", "{o}", "{t}"] {
                if f.matches(ph).count() != 1 {
                    return Err(contract(format!("frame {f:?} must contain {ph} once")));
                }
            }
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Renders `s` with a random frame and random surface forms.
    pub fn render(&self, s: &Slots, rng: &mut impl Rng) -> String {
        let t = &self.topics[s.topic];
        let mut pick = |v: &Variants| v[rng.gen_range(0..v.len())].clone();
        let (m, sub, obj, place) = (
            pick(&self.modifiers[s.modifier]),
            pick(&t.subjects[s.subject]),
            pick(&t.objects[s.object]),
            pick(&t.places),
        );
        self.frames[rng.gen_range(0..self.frames.len())]
            .replace("{m}", &m)
            .replace("{s}", &sub)
            .replace("{o}", &obj)
            .replace("{t}", &place)
    }

    /// Recovers the topic of a rendered sentence from its place word.
    pub fn topic_of(&self, text: &str) -> Option<usize> {
        let words: BTreeSet<&str> = text.split_whitespace().collect();
        self.topics
            .iter()
            .position(|t| t.places.iter().any(|p| words.contains(p.as_str())))
    }

    fn random_slots(&self, rng: &mut ChaCha8Rng, topic: usize) -> Slots {
        let t = &self.topics[topic];
        Slots {
            topic,
            subject: rng.gen_range(0..t.subjects.len()),
            object: rng.gen_range(0..t.objects.len()),
            modifier: rng.gen_range(0..self.modifiers.len()),
        }
    }

    fn other_topic(&self, rng: &mut ChaCha8Rng, topic: usize) -> usize {
        let k = rng.gen_range(0..self.topics.len() - 1);
        if k >= topic {
            k + 1
        } else {
            k
        }
    }

    fn check_count(&self, count: usize) -> Result<()> {
        self.validate()?;
        if count == 0 {
            return Err(contract("count must be at least 1"));
        }
        Ok(())
    }

    /// Anchor, a paraphrase of it (same slots, fresh wording and frame) and
    /// a negative from another topic.
    pub fn gen_triplets(&self, count: usize) -> Result<Vec<Triplet>> {
        self.check_count(count)?;
        if self.topics.len() < 2 {
            return Err(contract("triplets need at least two topics"));
        }
        let mut rng = self.rng(STREAM_TRIPLETS);
        Ok((0..count)
            .map(|_| {
                let topic = rng.gen_range(0..self.topics.len());
                let anchor = self.random_slots(&mut rng, topic);
                let other = self.other_topic(&mut rng, topic);
                let negative = self.random_slots(&mut rng, other);
                let a = self.render(&anchor, &mut rng);
                let p = self.render(&anchor, &mut rng);
                let n = self.render(&negative, &mut rng);
                Triplet::new(a, p, n)
            })
            .collect())
    }

    /// A second sentence keeping `keep` randomly chosen slots of `a` and
    /// changing the rest.
    fn partner(&self, rng: &mut ChaCha8Rng, a: &Slots, keep: usize) -> Slots {
        let mut kinds = SlotKind::ALL;
        kinds.shuffle(rng);
        let kept = &kinds[..keep];
        let keep_topic = kept.iter().any(|k| *k != SlotKind::Modifier) || self.topics.len() == 1;
        let topic = if keep_topic { a.topic } else { self.other_topic(rng, a.topic) };
        let t = &self.topics[topic];
        let mut pick = |kind: SlotKind, current: usize, size: usize| -> usize {
            if kept.contains(&kind) || size == 1 {
                current.min(size - 1)
            } else if topic == a.topic {
                (current + rng.gen_range(1..size)) % size
            } else {
                rng.gen_range(0..size)
            }
        };
        let subject = pick(SlotKind::Subject, a.subject, t.subjects.len());
        let object = pick(SlotKind::Object, a.object, t.objects.len());
        let modifier = pick(SlotKind::Modifier, a.modifier, self.modifiers.len());
        Slots {
            topic,
            subject,
            object,
            modifier,
        }
    }

    /// Unconditional similarity pairs with slot-overlap gold scores on 0–5.
    pub fn gen_sts_pairs(&self, count: usize) -> Result<Vec<SimilarityRecord>> {
        self.check_count(count)?;
        let mut rng = self.rng(STREAM_PAIRS);
        Ok((0..count)
            .map(|_| {
                let topic = rng.gen_range(0..self.topics.len());
                let a = self.random_slots(&mut rng, topic);
                let keep = rng.gen_range(0..=SLOT_COUNT);
                let b = self.partner(&mut rng, &a, keep);
                let (sa, sb) = (self.render(&a, &mut rng), self.render(&b, &mut rng));
                SimilarityRecord::new(sa, sb, gold_for_shared(a.shared_with(&b)))
            })
            .collect())
    }

    /// Conditional pairs: each sentence pair appears twice, once under a
    /// condition naming a slot the two share (gold 5) and once under one
    /// naming a slot they differ in (gold 1).
    pub fn gen_conditional_pairs(&self, count: usize) -> Result<Vec<SimilarityRecord>> {
        self.check_count(count)?;
        let mut rng = self.rng(STREAM_CONDITIONAL);
        let mut out = Vec::with_capacity(2 * count);
        while out.len() < 2 * count {
            let topic = rng.gen_range(0..self.topics.len());
            let a = self.random_slots(&mut rng, topic);
            let keep = rng.gen_range(1..SLOT_COUNT);
            let b = self.partner(&mut rng, &a, keep);
            let (shared, differing): (Vec<SlotKind>, Vec<SlotKind>) = SlotKind::ALL.iter().partition(|k| k.equal(&a, &b));
            let (Some(same), Some(diff)) = (shared.choose(&mut rng).copied(), differing.choose(&mut rng).copied()) else {
                continue;
            };
            let (sa, sb) = (self.render(&a, &mut rng), self.render(&b, &mut rng));
            out.push(SimilarityRecord::new(sa.clone(), sb.clone(), 5.0).with_condition(same.condition()));
            out.push(SimilarityRecord::new(sa, sb, 1.0).with_condition(diff.condition()));
        }
        Ok(out)
    }

    /// `groups` groups of `captions_per_group` distinct captions, one topic
    /// per group. A group describes a single scene: its captions share the
    /// topic, subject and object and differ in modifier and wording, much
    /// like several captions written for one image. The first caption of a
    /// group is its query and the rest are its references.
    pub fn gen_retrieval_groups(&self, groups: usize, captions_per_group: usize) -> Result<RetrievalCorpus> {
        self.validate()?;
        if captions_per_group < 2 {
            return Err(contract("a group needs a query and at least one reference"));
        }
        if groups == 0 || groups > self.topics.len() {
            return Err(contract(format!(
                "between 1 and {} groups are possible, {groups} requested",
                self.topics.len()
            )));
        }
        let mut rng = self.rng(STREAM_GROUPS);
        let mut topics: Vec<usize> = (0..self.topics.len()).collect();
        topics.shuffle(&mut rng);
        let mut items = Vec::with_capacity(groups * captions_per_group);
        let mut map = BTreeMap::new();
        let mut used = BTreeSet::new();
        for &topic in &topics[..groups] {
            let base = items.len();
            let scene = self.random_slots(&mut rng, topic);
            let mut attempts = 0;
            while items.len() < base + captions_per_group {
                attempts += 1;
                if attempts > 1000 * captions_per_group {
                    return Err(contract("grammar too small for that many distinct captions"));
                }
                let s = Slots {
                    modifier: rng.gen_range(0..self.modifiers.len()),
                    ..scene
                };
                let text = self.render(&s, &mut rng);
                if used.insert(text.clone()) {
                    items.push(RetrievalItem {
                        id: items.len(),
                        text,
                        embedding: Vec::new(),
                    });
                }
            }
            map.insert(base, (base + 1..base + captions_per_group).collect());
        }
        Ok(RetrievalCorpus { items, groups: map })
    }
}

/// Word-level Jaccard overlap.
pub fn lexical_overlap(a: &str, b: &str) -> f64 {
    let wa: BTreeSet<&str> = a.split_whitespace().collect();
    let wb: BTreeSet<&str> = b.split_whitespace().collect();
    let union = wa.union(&wb).count();
    if union == 0 {
        return 0.0;
    }
    wa.intersection(&wb).count() as f64 / union as f64
}
