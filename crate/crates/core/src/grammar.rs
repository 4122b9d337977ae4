//! Template grammar that generates (command, logical form) pairs.
//!
//! Templates marked with unlock iteration 0 model the offline prompt
//! collection used for the seed dataset. Later templates model phrasings
//! that only show up once workers talk to a live agent: deictic "here" and
//! "there", relative placement, memory tagging. Several of them reuse an
//! offline surface form with an extra word and a different logical form,
//! which is what makes the seed data and the interactive data disagree.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsl::{
    Action, ActionType, AnswerType, Conjunct, Direction, Filters, Location, LogicalForm, Predicate, ReferenceObject,
    Schematic, Span,
};
use crate::parser::Pair;

pub const SCHEMATICS: &[&str] = &[
    "cube", "box", "sphere", "ball", "pyramid", "dome", "arch", "wall", "tower", "house", "bridge", "square", "circle",
    "triangle", "rectangle", "hut", "fence", "column",
];
pub const COLORS: &[&str] = &[
    "white", "yellow", "red", "blue", "green", "orange", "purple", "pink", "cyan", "lime", "gray", "black", "brown",
    "magenta", "silver", "tan",
];
pub const NAMES: &[&str] = &[
    "cube", "sphere", "house", "tower", "fort", "tree", "wall", "pyramid", "dome", "arch", "hole", "statue", "pillar",
    "hut", "bridge",
];
pub const SIDES: &[&str] = &["left", "right", "front", "back"];
pub const HEADINGS: &[&str] = &["left", "right", "forward", "back", "up", "down"];
pub const HOLES: &[&str] = &["moat", "hole", "trench", "pit", "ditch", "tunnel"];
pub const MOBS: &[&str] = &["pig", "cow", "sheep", "chicken", "horse", "rabbit", "wolf", "llama"];
pub const TAGS: &[&str] = &["mine", "home", "castle", "base", "tall", "big", "pretty", "old"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Schematic,
    Color,
    Name,
    Side,
    Heading,
    Hole,
    Mob,
    Tag,
}

impl Slot {
    fn parse(s: &str) -> Option<Slot> {
        Some(match s {
            "schematic" => Slot::Schematic,
            "color" => Slot::Color,
            "name" => Slot::Name,
            "side" => Slot::Side,
            "heading" => Slot::Heading,
            "hole" => Slot::Hole,
            "mob" => Slot::Mob,
            "tag" => Slot::Tag,
            _ => return None,
        })
    }

    pub fn lexicon(self) -> &'static [&'static str] {
        match self {
            Slot::Schematic => SCHEMATICS,
            Slot::Color => COLORS,
            Slot::Name => NAMES,
            Slot::Side => SIDES,
            Slot::Heading => HEADINGS,
            Slot::Hole => HOLES,
            Slot::Mob => MOBS,
            Slot::Tag => TAGS,
        }
    }
}

/// Slot values chosen for one generated command, with their token positions.
#[derive(Clone, Debug)]
pub struct Fill {
    slots: Vec<(Slot, &'static str, u32)>,
}

impl Fill {
    fn get(&self, slot: Slot) -> (&'static str, u32) {
        self.slots
            .iter()
            .find(|(s, _, _)| *s == slot)
            .map(|&(_, w, i)| (w, i))
            .unwrap_or_else(|| panic!("template has no {slot:?} slot"))
    }

    pub fn span(&self, slot: Slot) -> Span {
        let (_, i) = self.get(slot);
        Span::new(0, i, i)
    }

    pub fn word(&self, slot: Slot) -> &'static str {
        self.get(slot).0
    }

    fn conj(&self, pred: Predicate, slot: Slot) -> Conjunct {
        Conjunct { pred_text: pred, obj_text: self.span(slot) }
    }

    /// has_name on `name_slot`, plus has_colour when a color word directly
    /// precedes it.
    fn filters(&self, name_slot: Slot) -> Filters {
        let mut conjuncts = vec![self.conj(Predicate::HasName, name_slot)];
        let (_, at) = self.get(name_slot);
        if self.slots.iter().any(|&(s, _, i)| s == Slot::Color && i + 1 == at) {
            conjuncts.push(self.conj(Predicate::HasColour, Slot::Color));
        }
        Filters::new(conjuncts)
    }

    fn reference(&self) -> Option<ReferenceObject> {
        Some(ReferenceObject { filters: self.filters(Slot::Name) })
    }

    fn schematic(&self, slot: Slot) -> Option<Schematic> {
        Some(Schematic { filters: self.filters(slot) })
    }

    fn direction(&self, slot: Slot) -> Direction {
        match self.word(slot) {
            "left" => Direction::Left,
            "right" => Direction::Right,
            "front" | "forward" => Direction::Front,
            "back" => Direction::Back,
            "up" => Direction::Up,
            "down" => Direction::Down,
            other => panic!("no direction for {other:?}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Template {
    pub id: &'static str,
    pub pattern: &'static str,
    /// First iteration at which workers use this phrasing.
    pub unlock: u32,
    build: fn(&Fill) -> LogicalForm,
}

impl Template {
    pub fn new(id: &'static str, pattern: &'static str, unlock: u32, build: fn(&Fill) -> LogicalForm) -> Self {
        for word in pattern.split_whitespace() {
            if let Some(name) = word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                assert!(Slot::parse(name).is_some(), "unknown slot {name} in {pattern:?}");
            }
        }
        Template { id, pattern, unlock, build }
    }

    pub fn slots(&self) -> Vec<Slot> {
        self.pattern
            .split_whitespace()
            .filter_map(|w| w.strip_prefix('{').and_then(|w| w.strip_suffix('}')).and_then(Slot::parse))
            .collect()
    }

    /// Number of distinct commands this template can produce.
    pub fn cardinality(&self) -> usize {
        self.slots().iter().map(|s| s.lexicon().len()).product()
    }

    pub fn instantiate(&self, rng: &mut impl Rng) -> Pair {
        let mut words = Vec::new();
        let mut slots = Vec::new();
        for (i, word) in self.pattern.split_whitespace().enumerate() {
            match word.strip_prefix('{').and_then(|w| w.strip_suffix('}')).and_then(Slot::parse) {
                Some(slot) => {
                    let value = *slot.lexicon().choose(rng).expect("non-empty lexicon");
                    slots.push((slot, value, i as u32));
                    words.push(value);
                }
                None => words.push(word),
            }
        }
        let lf = (self.build)(&Fill { slots });
        Pair::new(words.join(" "), lf)
    }
}

fn command(action: Action) -> LogicalForm {
    LogicalForm::command(vec![action])
}

fn at(relative_direction: Direction, reference_object: Option<ReferenceObject>) -> Option<Location> {
    Some(Location { relative_direction, reference_object })
}

fn build(f: &Fill) -> Action {
    Action { schematic: f.schematic(Slot::Schematic), ..Action::bare(ActionType::Build) }
}

fn build_at(f: &Fill, dir: Direction, with_ref: bool) -> LogicalForm {
    let reference = if with_ref { f.reference() } else { None };
    command(Action { location: at(dir, reference), ..build(f) })
}

fn destroy(f: &Fill) -> Action {
    Action { reference_object: f.reference(), ..Action::bare(ActionType::Destroy) }
}

fn dig(f: &Fill) -> Action {
    Action { schematic: Some(Schematic { filters: Filters::has_name(f.span(Slot::Hole)) }), ..Action::bare(ActionType::Dig) }
}

fn spawn(f: &Fill) -> Action {
    Action { schematic: Some(Schematic { filters: Filters::has_name(f.span(Slot::Mob)) }), ..Action::bare(ActionType::Spawn) }
}

fn bare(a: ActionType) -> LogicalForm {
    command(Action::bare(a))
}

fn standard_templates() -> Vec<Template> {
    use ActionType as A;
    use Direction as D;
    vec![
        // Offline prompt phrasings.
        Template::new("build", "build a {schematic}", 0, |f| command(build(f))),
        Template::new("build_color", "build a {color} {schematic}", 0, |f| command(build(f))),
        Template::new("destroy", "destroy the {name}", 0, |f| command(destroy(f))),
        Template::new("destroy_color", "destroy the {color} {name}", 0, |f| command(destroy(f))),
        Template::new("move_side", "move to the {side} of the {name}", 0, |f| {
            command(Action { location: at(f.direction(Slot::Side), f.reference()), ..Action::bare(A::Move) })
        }),
        Template::new("dig_around", "dig a {hole} around the {name}", 0, |f| {
            command(Action { location: at(D::Around, f.reference()), ..dig(f) })
        }),
        Template::new("dig", "dig a {hole}", 0, |f| command(dig(f))),
        Template::new("fill", "fill the {hole}", 0, |f| {
            command(Action {
                reference_object: Some(ReferenceObject { filters: Filters::has_name(f.span(Slot::Hole)) }),
                ..Action::bare(A::Fill)
            })
        }),
        Template::new("spawn", "spawn a {mob}", 0, |f| command(spawn(f))),
        Template::new("get", "bring me the {name}", 0, |f| {
            command(Action { reference_object: f.reference(), ..Action::bare(A::Get) })
        }),
        Template::new("count", "how many {name} are there", 0, |f| {
            LogicalForm::get_memory(Some(f.filters(Slot::Name)), AnswerType::Count)
        }),
        Template::new("name_that", "that is a {name}", 0, |f| {
            LogicalForm::put_memory(None, f.conj(Predicate::HasName, Slot::Name))
        }),
        Template::new("stop", "stop", 0, |_| bare(A::Stop)),
        Template::new("dance", "dance", 0, |_| bare(A::Dance)),
        Template::new("undo", "undo that", 0, |_| bare(A::Undo)),
        Template::new("resume", "resume", 0, |_| bare(A::Resume)),
        Template::new("come", "come here", 0, |_| {
            command(Action { location: at(D::Exact, None), ..Action::bare(A::Move) })
        }),
        Template::new("freebuild", "build something", 0, |_| bare(A::Freebuild)),
        // Phrasings that appear once workers interact with a live agent.
        Template::new("build_here", "build a {schematic} here", 3, |f| build_at(f, D::Exact, false)),
        Template::new("move_heading", "move {heading}", 1, |f| {
            command(Action { location: at(f.direction(Slot::Heading), None), ..Action::bare(A::Move) })
        }),
        Template::new("build_on_top", "put a {schematic} on top of the {name}", 1, |f| build_at(f, D::Up, true)),
        Template::new("dig_near", "dig a {hole} near the {name}", 2, |f| {
            command(Action { location: at(D::Near, f.reference()), ..dig(f) })
        }),
        Template::new("build_color_there", "build a {color} {schematic} there", 4, |f| build_at(f, D::Exact, false)),
        Template::new("what_color", "what is the {color} thing", 2, |f| {
            LogicalForm::get_memory(Some(Filters::new(vec![f.conj(Predicate::HasColour, Slot::Color)])), AnswerType::Name)
        }),
        Template::new("build_side", "build a {schematic} to the {side} of the {name}", 3, |f| {
            let dir = f.direction(Slot::Side);
            build_at(f, dir, true)
        }),
        Template::new("destroy_color_there", "destroy the {color} {name} there", 5, |f| {
            command(Action { location: at(D::Exact, None), ..destroy(f) })
        }),
        Template::new("fill_with", "fill the {hole} with {color}", 4, |f| {
            command(Action {
                reference_object: Some(ReferenceObject { filters: Filters::has_name(f.span(Slot::Hole)) }),
                schematic: Some(Schematic { filters: Filters::new(vec![f.conj(Predicate::HasColour, Slot::Color)]) }),
                ..Action::bare(A::Fill)
            })
        }),
        Template::new("tag", "tag the {name} as {tag}", 5, |f| {
            LogicalForm::put_memory(Some(f.filters(Slot::Name)), f.conj(Predicate::HasTag, Slot::Tag))
        }),
        Template::new("spawn_near", "spawn a {mob} near the {name}", 6, |f| {
            command(Action { location: at(D::Near, f.reference()), ..spawn(f) })
        }),
        Template::new("dig_here", "dig a {hole} here", 6, |f| command(Action { location: at(D::Exact, None), ..dig(f) })),
        Template::new("make_color_near", "make a {color} {schematic} near the {name}", 7, |f| {
            build_at(f, D::Near, true)
        }),
        Template::new("walk_side_color", "walk to the {side} of the {color} {name}", 7, |f| {
            command(Action { location: at(f.direction(Slot::Side), f.reference()), ..Action::bare(A::Move) })
        }),
        Template::new("get_color", "bring me the {color} {name}", 8, |f| {
            command(Action { reference_object: f.reference(), ..Action::bare(A::Get) })
        }),
        Template::new("count_color", "how many {color} {name} are there", 8, |f| {
            LogicalForm::get_memory(Some(f.filters(Slot::Name)), AnswerType::Count)
        }),
        Template::new("build_color_on_top", "put a {color} {schematic} on top of the {name}", 9, |f| {
            build_at(f, D::Up, true)
        }),
        Template::new("spawn_here", "spawn a {mob} here", 9, |f| command(Action { location: at(D::Exact, None), ..spawn(f) })),
        Template::new("dig_side", "dig a {hole} to the {side} of the {name}", 10, |f| {
            let dir = f.direction(Slot::Side);
            command(Action { location: at(dir, f.reference()), ..dig(f) })
        }),
        Template::new("build_color_side", "build a {color} {schematic} to the {side} of the {name}", 10, |f| {
            let dir = f.direction(Slot::Side);
            build_at(f, dir, true)
        }),
    ]
}

/// Templates with an unlock schedule; stands in for both the seed dataset's
/// source and the ground-truth annotator.
#[derive(Clone, Debug)]
pub struct GeneratorGrammar {
    pub templates: Vec<Template>,
}

impl Default for GeneratorGrammar {
    fn default() -> Self {
        GeneratorGrammar { templates: standard_templates() }
    }
}

impl GeneratorGrammar {
    pub fn unlocked(&self, iteration: u32) -> Vec<&Template> {
        self.templates.iter().filter(|t| t.unlock <= iteration).collect()
    }

    pub fn template(&self, id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.id == id)
    }

    /// One pair drawn uniformly over templates unlocked at `iteration`.
    pub fn sample(&self, iteration: u32, rng: &mut impl Rng) -> Pair {
        let open = self.unlocked(iteration);
        open.choose(rng).expect("at least one unlocked template").instantiate(rng)
    }

    pub fn generate(&self, n: usize, iteration: u32, seed: u64) -> Vec<Pair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(iteration, &mut rng)).collect()
    }

    /// Every distinct command of the templates unlocked at `iteration`.
    pub fn enumerate(&self, iteration: u32) -> Vec<Pair> {
        let mut out = Vec::new();
        for t in self.unlocked(iteration) {
            let slots = t.slots();
            let mut choice = vec![0usize; slots.len()];
            loop {
                let mut it = choice.iter();
                let mut fill = Vec::new();
                let mut words = Vec::new();
                for (i, word) in t.pattern.split_whitespace().enumerate() {
                    match word.strip_prefix('{').and_then(|w| w.strip_suffix('}')).and_then(Slot::parse) {
                        Some(slot) => {
                            let v = slot.lexicon()[*it.next().unwrap()];
                            fill.push((slot, v, i as u32));
                            words.push(v);
                        }
                        None => words.push(word),
                    }
                }
                out.push(Pair::new(words.join(" "), (t.build)(&Fill { slots: fill })));
                // Odometer increment over slot choices.
                let mut k = 0;
                loop {
                    if k == slots.len() {
                        break;
                    }
                    choice[k] += 1;
                    if choice[k] < slots[k].lexicon().len() {
                        break;
                    }
                    choice[k] = 0;
                    k += 1;
                }
                if k == slots.len() {
                    break;
                }
            }
        }
        out
    }
}
