//! Seeded English-like line generator for synthetic corpora: common words
//! joined by a sparse random bigram grammar.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &str = "the of and to in is was he for it with as his on be at by had are but from or have an they which \
one you were her all she there would their we him been has when who will more no if out so said what up its about \
into than them can only other new some could time these two may then do first any my now such like our over man me \
even most made after also did many before must through back years where much your way well down should because each \
just those people how too little state good very make world still own see men work long get here between both life \
being under never day same another know while last might us great old year off come since against go came right used \
take three place small found part again house cup home big end does told went read fish light hand high keep eye \
city tree cross farm hard start story saw far sea draw left late run press close night real few north open seem \
together next white children begin got walk example paper group always music mark often letter until mile river car \
feet care second book carry took science eat room friend began idea stop once base hear horse cut sure watch color \
face wood main enough plain girl usual young ready above ever red list though feel talk bird soon body dog family";

/// Grammar over a fixed word list. Each word has a handful of weighted
/// successors; lines start from a smaller set of opening words.
#[derive(Clone, Debug)]
pub struct TextGrammar {
    words: Vec<String>,
    starts: Vec<usize>,
    successors: Vec<Vec<(usize, f64)>>,
    min_words: usize,
    max_words: usize,
}

impl TextGrammar {
    /// The built-in lowercase vocabulary with successors drawn from `seed`.
    pub fn english_like(seed: u64) -> Self {
        let mut words: Vec<String> = WORDS.split_whitespace().map(str::to_owned).collect();
        words.sort();
        words.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = words.len();
        let mut pool: Vec<usize> = (0..n).collect();
        pool.shuffle(&mut rng);
        let starts = pool[..n / 6].to_vec();
        let successors = (0..n)
            .map(|_| {
                let k = rng.random_range(3..=6);
                let picks = rand::seq::index::sample(&mut rng, n, k);
                picks.iter().enumerate().map(|(rank, w)| (w, 1.0 / (rank + 1) as f64)).collect()
            })
            .collect();
        TextGrammar { words, starts, successors, min_words: 2, max_words: 4 }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Characters used by the vocabulary, space included, sorted.
    pub fn charset(&self) -> Vec<char> {
        let mut cs: Vec<char> = self.words.iter().flat_map(|w| w.chars()).chain([' ']).collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    }

    pub fn sample_line(&self, rng: &mut impl Rng) -> String {
        let len = rng.random_range(self.min_words..=self.max_words);
        let mut w = *self.starts.choose(rng).expect("non-empty start set");
        let mut out = vec![self.words[w].as_str()];
        while out.len() < len {
            w = self.successors[w].choose_weighted(rng, |s| s.1).expect("positive weights").0;
            out.push(&self.words[w]);
        }
        out.join(" ")
    }

    /// `n` lines; line `i` uses ChaCha stream `(seed, i)`.
    pub fn sample_lines(&self, n: usize, seed: u64) -> Vec<String> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.sample_line(&mut rng)
            })
            .collect()
    }
}
