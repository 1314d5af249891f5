//! Deterministic English-like byte corpus for runs without a corpus file.
//!
//! An order-2 word Markov chain is fitted to a few public-domain American
//! texts embedded below and sampled with a seeded generator until the
//! requested size is reached.

use std::collections::HashMap;

use crate::tensor::RngState;

/// 1 MiB.
pub const DEFAULT_CORPUS_BYTES: usize = 1 << 20;

const SOURCES: &[&str] = &[
    // Gettysburg Address (1863)
    "Four score and seven years ago our fathers brought forth on this continent, a new nation, conceived in \
     Liberty, and dedicated to the proposition that all men are created equal. Now we are engaged in a great \
     civil war, testing whether that nation, or any nation so conceived and so dedicated, can long endure. We \
     are met on a great battle-field of that war. We have come to dedicate a portion of that field, as a final \
     resting place for those who here gave their lives that that nation might live. It is altogether fitting \
     and proper that we should do this. But, in a larger sense, we can not dedicate, we can not consecrate, we \
     can not hallow this ground. The brave men, living and dead, who struggled here, have consecrated it, far \
     above our poor power to add or detract. The world will little note, nor long remember what we say here, \
     but it can never forget what they did here. It is for us the living, rather, to be dedicated here to the \
     unfinished work which they who fought here have thus far so nobly advanced. It is rather for us to be here \
     dedicated to the great task remaining before us, that from these honored dead we take increased devotion \
     to that cause for which they gave the last full measure of devotion, that we here highly resolve that \
     these dead shall not have died in vain, that this nation, under God, shall have a new birth of freedom, \
     and that government of the people, by the people, for the people, shall not perish from the earth.",
    // Preamble to the Constitution (1787)
    "We the People of the United States, in Order to form a more perfect Union, establish Justice, insure \
     domestic Tranquility, provide for the common defence, promote the general Welfare, and secure the \
     Blessings of Liberty to ourselves and our Posterity, do ordain and establish this Constitution for the \
     United States of America.",
    // Declaration of Independence (1776), opening
    "When in the Course of human events, it becomes necessary for one people to dissolve the political bands \
     which have connected them with another, and to assume among the powers of the earth, the separate and \
     equal station to which the Laws of Nature and of Nature's God entitle them, a decent respect to the \
     opinions of mankind requires that they should declare the causes which impel them to the separation. \
     We hold these truths to be self-evident, that all men are created equal, that they are endowed by their \
     Creator with certain unalienable Rights, that among these are Life, Liberty and the pursuit of Happiness. \
     That to secure these rights, Governments are instituted among Men, deriving their just powers from the \
     consent of the governed, That whenever any Form of Government becomes destructive of these ends, it is \
     the Right of the People to alter or to abolish it, and to institute new Government, laying its foundation \
     on such principles and organizing its powers in such form, as to them shall seem most likely to effect \
     their Safety and Happiness. Prudence, indeed, will dictate that Governments long established should not \
     be changed for light and transient causes; and accordingly all experience hath shewn, that mankind are \
     more disposed to suffer, while evils are sufferable, than to right themselves by abolishing the forms to \
     which they are accustomed. But when a long train of abuses and usurpations, pursuing invariably the same \
     Object evinces a design to reduce them under absolute Despotism, it is their right, it is their duty, to \
     throw off such Government, and to provide new Guards for their future security.",
    // Second Inaugural Address (1865), closing
    "With malice toward none, with charity for all, with firmness in the right as God gives us to see the \
     right, let us strive on to finish the work we are in, to bind up the nation's wounds, to care for him who \
     shall have borne the battle and for his widow and his orphan, to do all which may achieve and cherish a \
     just and lasting peace among ourselves and with all nations.",
    // First Amendment (1791)
    "Congress shall make no law respecting an establishment of religion, or prohibiting the free exercise \
     thereof; or abridging the freedom of speech, or of the press; or the right of the people peaceably to \
     assemble, and to petition the Government for a redress of grievances.",
];

fn words() -> Vec<&'static str> {
    SOURCES.iter().flat_map(|s| s.split_whitespace()).collect()
}

fn ends_sentence(w: &str) -> bool {
    w.ends_with('.') || w.ends_with(';')
}

/// Exactly `len` bytes of generated text; equal seeds give equal output.
pub fn synthesize(len: usize, seed: u64) -> Vec<u8> {
    let words = words();
    let mut chain: HashMap<(&str, &str), Vec<&str>> = HashMap::new();
    for w in words.windows(3) {
        chain.entry((w[0], w[1])).or_default().push(w[2]);
    }
    let starts: Vec<(&str, &str)> = words
        .windows(3)
        .filter(|w| ends_sentence(w[0]))
        .map(|w| (w[1], w[2]))
        .chain(std::iter::once((words[0], words[1])))
        .collect();

    let mut rng = RngState::new(seed);
    let mut out = String::with_capacity(len + 64);
    let mut sentences = 0usize;
    while out.len() < len {
        let (mut a, mut b) = starts[rng.below(starts.len())];
        out.push_str(a);
        out.push(' ');
        out.push_str(b);
        for _ in 0..200 {
            if ends_sentence(b) {
                break;
            }
            let Some(next) = chain.get(&(a, b)) else { break };
            let c = next[rng.below(next.len())];
            out.push(' ');
            out.push_str(c);
            (a, b) = (b, c);
        }
        if !ends_sentence(b) {
            out.push('.');
        }
        sentences += 1;
        out.push(if sentences.is_multiple_of(6) { '\n' } else { ' ' });
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(len);
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synthesize(10_000, 3);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthesize(10_000, 3));
        assert_ne!(a, synthesize(10_000, 4));
        assert!(a.is_ascii());
    }
}
